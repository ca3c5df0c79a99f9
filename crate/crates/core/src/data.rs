use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ChmmError, Result};
use crate::model::{State, StateSpace};

/// Observation at one (patient, site, month) cell; `None` is missing.
pub type Observation = Option<State>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Education,
    Decolonization,
}

impl Arm {
    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Education => "education",
            Arm::Decolonization => "decolonization",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arm {
    type Err = ChmmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "education" | "edu" => Ok(Arm::Education),
            "decolonization" | "decol" => Ok(Arm::Decolonization),
            other => Err(ChmmError::InvalidParameter(format!("unknown arm `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patient {
    pub id: String,
    pub arm: Arm,
}

/// Observations aligned on a monthly grid `0..num_months`, stored
/// `[patient][site][month]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CohortDataset {
    sites: Vec<String>,
    num_months: usize,
    patients: Vec<Patient>,
    obs: Vec<Observation>,
}

impl CohortDataset {
    pub fn new(
        sites: Vec<String>,
        num_months: usize,
        patients: Vec<Patient>,
        obs: Vec<Observation>,
    ) -> Result<Self> {
        if sites.is_empty() || num_months == 0 {
            return Err(ChmmError::InvalidParameter(
                "dataset needs at least one site and one month".into(),
            ));
        }
        if obs.len() != patients.len() * sites.len() * num_months {
            return Err(ChmmError::InvalidParameter(format!(
                "observation tensor has {} cells, expected {}",
                obs.len(),
                patients.len() * sites.len() * num_months
            )));
        }
        Ok(Self {
            sites,
            num_months,
            patients,
            obs,
        })
    }

    /// A dataset with every cell missing.
    pub fn empty_grid(sites: Vec<String>, num_months: usize, patients: Vec<Patient>) -> Result<Self> {
        let n = patients.len() * sites.len() * num_months;
        Self::new(sites, num_months, patients, vec![None; n])
    }

    pub fn sites(&self) -> &[String] {
        &self.sites
    }

    pub fn num_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn num_months(&self) -> usize {
        self.num_months
    }

    pub fn num_patients(&self) -> usize {
        self.patients.len()
    }

    pub fn patients(&self) -> &[Patient] {
        &self.patients
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    #[inline]
    fn index(&self, patient: usize, site: usize, month: usize) -> usize {
        (patient * self.sites.len() + site) * self.num_months + month
    }

    #[inline]
    pub fn get(&self, patient: usize, site: usize, month: usize) -> Observation {
        self.obs[self.index(patient, site, month)]
    }

    pub fn set(&mut self, patient: usize, site: usize, month: usize, value: Observation) {
        let i = self.index(patient, site, month);
        self.obs[i] = value;
    }

    /// One patient's observations for one site across all months.
    pub fn series(&self, patient: usize, site: usize) -> &[Observation] {
        let start = self.index(patient, site, 0);
        &self.obs[start..start + self.num_months]
    }

    /// All of one patient's observations, `[site][month]`.
    pub fn patient_block(&self, patient: usize) -> &[Observation] {
        let len = self.sites.len() * self.num_months;
        &self.obs[patient * len..(patient + 1) * len]
    }

    pub fn arms(&self) -> Vec<Arm> {
        let mut arms: Vec<Arm> = self.patients.iter().map(|p| p.arm).collect();
        arms.sort();
        arms.dedup();
        arms
    }

    /// The sub-cohort belonging to one study arm.
    pub fn filter_arm(&self, arm: Arm) -> Self {
        let block = self.sites.len() * self.num_months;
        let mut patients = Vec::new();
        let mut obs = Vec::new();
        for (p, patient) in self.patients.iter().enumerate() {
            if patient.arm == arm {
                patients.push(patient.clone());
                obs.extend_from_slice(&self.obs[p * block..(p + 1) * block]);
            }
        }
        Self {
            sites: self.sites.clone(),
            num_months: self.num_months,
            patients,
            obs,
        }
    }

    /// Checks that the dataset can be modelled in `space`.
    pub fn check_compatible(&self, space: &StateSpace) -> Result<()> {
        if self.sites.as_slice() != space.chain_labels() {
            return Err(ChmmError::InvalidParameter(format!(
                "dataset sites {:?} do not match model chains {:?}",
                self.sites,
                space.chain_labels()
            )));
        }
        if let Some(bad) = self
            .obs
            .iter()
            .flatten()
            .find(|&&s| s as usize >= space.num_states())
        {
            return Err(ChmmError::InvalidState {
                chain: 0,
                state: *bad as usize,
                num_states: space.num_states(),
            });
        }
        Ok(())
    }

    /// Pooled fraction of non-missing observations equal to `state` at
    /// `site`, across all patients and months. `None` if nothing observed.
    pub fn pooled_fraction(&self, site: usize, state: State) -> Option<f64> {
        let mut hits = 0usize;
        let mut total = 0usize;
        for p in 0..self.num_patients() {
            for o in self.series(p, site).iter().flatten() {
                total += 1;
                hits += usize::from(*o == state);
            }
        }
        (total > 0).then(|| hits as f64 / total as f64)
    }

    pub fn observed_count(&self) -> usize {
        self.obs.iter().filter(|o| o.is_some()).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CohortDataset {
        let patients = vec![
            Patient {
                id: "a".into(),
                arm: Arm::Education,
            },
            Patient {
                id: "b".into(),
                arm: Arm::Decolonization,
            },
        ];
        let mut d =
            CohortDataset::empty_grid(vec!["nares".into(), "skin".into()], 3, patients).unwrap();
        d.set(0, 0, 0, Some(1));
        d.set(0, 1, 2, Some(0));
        d.set(1, 0, 1, Some(1));
        d
    }

    #[test]
    fn indexing_and_series() {
        let d = tiny();
        assert_eq!(d.series(0, 0), &[Some(1), None, None]);
        assert_eq!(d.series(0, 1), &[None, None, Some(0)]);
        assert_eq!(d.get(1, 0, 1), Some(1));
        assert_eq!(d.observed_count(), 3);
    }

    #[test]
    fn filter_by_arm() {
        let d = tiny();
        let decol = d.filter_arm(Arm::Decolonization);
        assert_eq!(decol.num_patients(), 1);
        assert_eq!(decol.series(0, 0), &[None, Some(1), None]);
        assert_eq!(d.arms(), vec![Arm::Education, Arm::Decolonization]);
    }

    #[test]
    fn pooled_fraction_ignores_missing() {
        let d = tiny();
        assert_eq!(d.pooled_fraction(0, 1), Some(1.0));
        assert_eq!(d.pooled_fraction(1, 1), Some(0.0));
        let empty = CohortDataset::empty_grid(vec!["x".into()], 2, vec![]).unwrap();
        assert_eq!(empty.pooled_fraction(0, 1), None);
    }

    #[test]
    fn arm_parsing() {
        assert_eq!("decol".parse::<Arm>().unwrap(), Arm::Decolonization);
        assert_eq!("Education".parse::<Arm>().unwrap(), Arm::Education);
        assert!("placebo".parse::<Arm>().is_err());
    }
}
