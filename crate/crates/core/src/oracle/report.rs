use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    /// `|lhs − rhs| ≤ tol`
    Eq,
    /// `lhs ≤ rhs + tol`
    Le,
    /// `lhs ≥ rhs − tol`
    Ge,
}

impl Relation {
    fn symbol(self) -> &'static str {
        match self {
            Relation::Eq => "eq",
            Relation::Le => "le",
            Relation::Ge => "ge",
        }
    }
}

/// One assertion: a name, both sides, a tolerance, and how they compare.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub tolerance: f64,
    pub relation: Relation,
}

impl Check {
    pub fn new(
        name: impl Into<String>,
        lhs: f64,
        relation: Relation,
        rhs: f64,
        tolerance: f64,
    ) -> Self {
        Self {
            name: name.into(),
            lhs,
            rhs,
            tolerance,
            relation,
        }
    }

    /// NaN on either side always fails.
    pub fn passed(&self) -> bool {
        match self.relation {
            Relation::Eq => (self.lhs - self.rhs).abs() <= self.tolerance,
            Relation::Le => self.lhs <= self.rhs + self.tolerance,
            Relation::Ge => self.lhs >= self.rhs - self.tolerance,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} lhs={:e} rel={} rhs={:e} tol={:e} {}",
            self.name,
            self.lhs,
            self.relation.symbol(),
            self.rhs,
            self.tolerance,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

/// Structured text report: `#`-prefixed notes, then one check per line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub notes: Vec<String>,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    pub fn push(&mut self, check: Check) {
        self.checks.push(check);
    }

    pub fn extend(&mut self, other: Report) {
        self.notes.extend(other.notes);
        self.checks.extend(other.checks);
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for n in &self.notes {
            writeln!(f, "# {n}")?;
        }
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nan_fails_every_relation() {
        for rel in [Relation::Eq, Relation::Le, Relation::Ge] {
            assert!(!Check::new("x", f64::NAN, rel, 0.0, 1.0).passed());
        }
        let c = Check::new("risk", 0.5, Relation::Le, 0.5, 0.0);
        assert!(c.passed());
        assert_eq!(c.to_string(), "risk lhs=5e-1 rel=le rhs=5e-1 tol=0e0 pass");
    }
}
