use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::repro::seed_all;

/// Partition of patient ids into train/val/test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

impl SplitPart {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(SplitPart::Train),
            "val" | "validation" => Ok(SplitPart::Val),
            "test" => Ok(SplitPart::Test),
            other => Err(Error::Split(format!("unknown split part `{other}`"))),
        }
    }
}

impl PatientSplit {
    pub fn part(&self, part: SplitPart) -> &[String] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Val => &self.val,
            SplitPart::Test => &self.test,
        }
    }

    /// Errors if any patient appears in more than one partition.
    pub fn check_disjoint(&self) -> Result<()> {
        let parts = [("train", &self.train), ("val", &self.val), ("test", &self.test)];
        for (i, (name_a, a)) in parts.iter().enumerate() {
            let set_a: BTreeSet<&String> = a.iter().collect();
            if set_a.len() != a.len() {
                return Err(Error::Split(format!("duplicate patient within {name_a}")));
            }
            for (name_b, b) in &parts[i + 1..] {
                if let Some(p) = b.iter().find(|p| set_a.contains(p)) {
                    return Err(Error::Split(format!("patient {p} in both {name_a} and {name_b}")));
                }
            }
        }
        Ok(())
    }

    /// Errors unless the partitions exactly cover `patients`.
    pub fn check_covers(&self, patients: &[String]) -> Result<()> {
        let all: BTreeSet<&String> = self.train.iter().chain(&self.val).chain(&self.test).collect();
        let expected: BTreeSet<&String> = patients.iter().collect();
        if all != expected {
            return Err(Error::Split("split does not cover the dataset's patients exactly".into()));
        }
        Ok(())
    }

    /// Text manifest, one `part: id id ...` line per partition.
    pub fn to_manifest(&self) -> String {
        format!(
            "train: {}\nval: {}\ntest: {}\n",
            self.train.join(" "),
            self.val.join(" "),
            self.test.join(" ")
        )
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut split = PatientSplit { train: vec![], val: vec![], test: vec![] };
        let mut seen = BTreeSet::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (name, ids) = line
                .split_once(':')
                .ok_or_else(|| Error::Split(format!("malformed manifest line `{line}`")))?;
            let part = SplitPart::parse(name)?;
            if !seen.insert(part as u8) {
                return Err(Error::Split(format!("partition `{name}` listed twice")));
            }
            let ids: Vec<String> = ids.split_whitespace().map(str::to_string).collect();
            match part {
                SplitPart::Train => split.train = ids,
                SplitPart::Val => split.val = ids,
                SplitPart::Test => split.test = ids,
            }
        }
        split.check_disjoint()?;
        Ok(split)
    }
}

/// Seeded random patient-wise split. `patients` is sorted before shuffling so
/// the result depends only on the id set and the seed.
pub fn split_by_patient(patients: &[String], counts: (usize, usize, usize), seed: u64) -> Result<PatientSplit> {
    let mut ids: Vec<String> = patients.to_vec();
    ids.sort();
    ids.dedup();
    let (n_train, n_val, n_test) = counts;
    if n_train + n_val + n_test != ids.len() {
        return Err(Error::Split(format!(
            "counts {n_train}+{n_val}+{n_test} do not sum to {} patients",
            ids.len()
        )));
    }
    ids.shuffle(&mut seed_all(seed).rng("patient-split"));
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    let split = PatientSplit { train: ids, val, test };
    split.check_disjoint()?;
    Ok(split)
}
