//! In-memory datasets and their on-disk layout.
//!
//! A dataset file is an `ndcore` bundle: a text header with `d`, `n`,
//! `num_classes`, the record count and one `env.<i>` line per environment,
//! then `x_plus`, `x_label` and (when present) `s_true` as `f64` matrices and
//! `class_id`, `env_id`, `s_class` as `i32` arrays (`-1` for an absent
//! `s_class`).

use std::path::Path;

use ndcore::{Bundle, Tensor};

use crate::error::{config_err, Error, Result};
use crate::hash::content_hash;
use crate::scmgen::{Environment, PairRecord};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub d: usize,
    pub n: usize,
    pub num_classes: usize,
    pub envs: Vec<Environment>,
    pub records: Vec<PairRecord>,
}

impl Dataset {
    pub fn new(
        d: usize,
        n: usize,
        num_classes: usize,
        envs: Vec<Environment>,
        records: Vec<PairRecord>,
    ) -> Result<Self> {
        let ds = Self {
            d,
            n,
            num_classes,
            envs,
            records,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.x_plus.len() != self.d || r.x_label.len() != self.d {
                return Err(config_err(format!(
                    "record {i}: vectors must have d = {} entries",
                    self.d
                )));
            }
            if let Some(s) = &r.s_true {
                if s.len() != self.n {
                    return Err(config_err(format!(
                        "record {i}: s_true must have n = {} entries",
                        self.n
                    )));
                }
            }
            if r.class_id as usize >= self.num_classes {
                return Err(config_err(format!(
                    "record {i}: class_id {} out of range",
                    r.class_id
                )));
            }
            if !self.envs.iter().any(|e| e.env_id == r.env_id) {
                return Err(config_err(format!(
                    "record {i}: env_id {} not in the env table",
                    r.env_id
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn x_plus(&self) -> Tensor {
        self.stack(|r| &r.x_plus)
    }

    pub fn x_label(&self) -> Tensor {
        self.stack(|r| &r.x_label)
    }

    fn stack(&self, f: impl Fn(&PairRecord) -> &Vec<f64>) -> Tensor {
        let data = self
            .records
            .iter()
            .flat_map(|r| f(r).iter().copied())
            .collect();
        Tensor::matrix(self.records.len(), self.d, data)
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.class_id as usize).collect()
    }

    pub fn s_classes(&self) -> Option<Vec<usize>> {
        self.records
            .iter()
            .map(|r| r.s_class.map(|c| c as usize))
            .collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            d: self.d,
            n: self.n,
            num_classes: self.num_classes,
            envs: self.envs.clone(),
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    pub fn to_bundle(&self) -> Result<Bundle> {
        let mut b = Bundle::new();
        b.set_meta("kind", "dataset")
            .set_meta("version", DATASET_VERSION)
            .set_meta("d", self.d)
            .set_meta("n", self.n)
            .set_meta("num_classes", self.num_classes)
            .set_meta("count", self.records.len())
            .set_meta("envs", self.envs.len());
        for (i, e) in self.envs.iter().enumerate() {
            let shift = e
                .style_shift
                .as_ref()
                .map(|v| {
                    v.iter()
                        .map(|x| format!("{x:?}"))
                        .collect::<Vec<_>>()
                        .join(",")
                })
                .unwrap_or_default();
            b.set_meta(
                &format!("env.{i}"),
                format!("{}:{:?}:{shift}", e.env_id, e.p_sc),
            );
        }
        b.put_tensor("x_plus", &self.x_plus())?;
        b.put_tensor("x_label", &self.x_label())?;
        let has_s = !self.records.is_empty() && self.records.iter().all(|r| r.s_true.is_some());
        if has_s {
            let data = self
                .records
                .iter()
                .flat_map(|r| r.s_true.as_ref().expect("checked").iter().copied())
                .collect();
            b.put_tensor("s_true", &Tensor::matrix(self.records.len(), self.n, data))?;
        }
        let ints = |f: &dyn Fn(&PairRecord) -> i32| self.records.iter().map(f).collect::<Vec<_>>();
        b.put_ints("class_id", &ints(&|r| r.class_id as i32))?;
        b.put_ints("env_id", &ints(&|r| r.env_id as i32))?;
        b.put_ints("s_class", &ints(&|r| r.s_class.map_or(-1, |c| c as i32)))?;
        Ok(b)
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        if b.meta("kind")? != "dataset" {
            return Err(Error::Mismatch {
                what: "artifact kind".into(),
                expected: "dataset".into(),
                found: b.meta("kind")?.into(),
            });
        }
        let version: u32 = b.meta_parse("version")?;
        if version != DATASET_VERSION {
            return Err(Error::Mismatch {
                what: "dataset version".into(),
                expected: DATASET_VERSION.to_string(),
                found: version.to_string(),
            });
        }
        let d: usize = b.meta_parse("d")?;
        let n: usize = b.meta_parse("n")?;
        let num_classes: usize = b.meta_parse("num_classes")?;
        let count: usize = b.meta_parse("count")?;
        let n_envs: usize = b.meta_parse("envs")?;
        let mut envs = Vec::with_capacity(n_envs);
        for i in 0..n_envs {
            let raw = b.meta(&format!("env.{i}"))?;
            let bad = || config_err(format!("malformed env entry {raw:?}"));
            let mut parts = raw.splitn(3, ':');
            let env_id = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let p_sc = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let shift = parts.next().ok_or_else(bad)?;
            let style_shift = if shift.is_empty() {
                None
            } else {
                Some(
                    shift
                        .split(',')
                        .map(|s| s.parse::<f64>().map_err(|_| bad()))
                        .collect::<Result<Vec<_>>>()?,
                )
            };
            envs.push(Environment {
                env_id,
                p_sc,
                style_shift,
            });
        }
        let xp = b.tensor("x_plus")?;
        let xl = b.tensor("x_label")?;
        let s = b.tensor("s_true").ok();
        let (cls, env, sc) = (b.ints("class_id")?, b.ints("env_id")?, b.ints("s_class")?);
        if xp.rows() != count
            || xl.rows() != count
            || cls.len() != count
            || env.len() != count
            || sc.len() != count
        {
            return Err(config_err("dataset arrays disagree with the record count"));
        }
        if count > 0 && (xp.cols() != d || xl.cols() != d || s.is_some_and(|t| t.cols() != n)) {
            return Err(config_err("dataset array widths disagree with d and n"));
        }
        let records = (0..count)
            .map(|i| PairRecord {
                x_plus: xp.row_slice(i).to_vec(),
                x_label: xl.row_slice(i).to_vec(),
                s_true: s.map(|t| t.row_slice(i).to_vec()),
                env_id: env[i] as u32,
                class_id: cls[i] as u32,
                s_class: (sc[i] >= 0).then_some(sc[i] as u32),
            })
            .collect();
        Dataset::new(d, n, num_classes, envs, records)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.to_bundle()?.to_bytes())
    }

    pub fn hash(&self) -> Result<String> {
        Ok(content_hash(&self.to_bytes()?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_bundle()?.save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bundle(&Bundle::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scmgen::{ColoredConfig, Mixing, Scm, ScmConfig, SpuriousModel};

    #[test]
    fn bytes_round_trip() {
        let scm = Scm::new(ScmConfig {
            d: 11,
            n: 3,
            noise_sigma: 0.0,
            mixing: Mixing::ColoredCompositor,
            num_classes: 2,
            label_noise: 0.1,
            seed: 3,
            spurious: SpuriousModel::default(),
            colored: ColoredConfig::default(),
        })
        .unwrap();
        let mut env = Environment::new(0, 0.775).unwrap();
        env.style_shift = Some(vec![0.1, 0.0, -0.25]);
        let recs = scm.gen_colored_dataset(&env, 20, "train").unwrap();
        let ds = Dataset::new(11, 3, 2, vec![env], recs).unwrap();
        let bytes = ds.to_bytes().unwrap();
        let back = Dataset::from_bundle(&Bundle::from_reader(bytes.as_slice()).unwrap()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}
