use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::DatasetIndex;
use crate::error::{Error, Result};
use crate::seed;

pub const N_FOLDS: usize = 3;

const BIWI_DESIGN: &str = include_str!("../../data/splits/biwi/design.txt");
const BIWI_TEST: &str = include_str!("../../data/splits/biwi/test.txt");
const PKU_DESIGN: &str = include_str!("../../data/splits/robotpku/design.txt");
const PKU_TEST: &str = include_str!("../../data/splits/robotpku/test.txt");

/// Identity-level partition into a design subset (train + validation) and a
/// held-out test subset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub design_ids: Vec<u32>,
    pub test_ids: Vec<u32>,
    pub n_train: usize,
    pub n_val: usize,
}

fn parse_id_list(text: &str, origin: &str) -> Result<Vec<u32>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.parse::<u32>()
                .map_err(|_| Error::Config(format!("{origin}: `{l}` is not an identity label")))
        })
        .collect()
}

impl SplitSpec {
    pub fn new(design_ids: Vec<u32>, test_ids: Vec<u32>, n_val: usize) -> Result<Self> {
        let spec = SplitSpec {
            n_train: design_ids.len().saturating_sub(n_val),
            n_val,
            design_ids,
            test_ids,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let design: BTreeSet<u32> = self.design_ids.iter().copied().collect();
        if design.len() != self.design_ids.len() {
            return Err(Error::Config("duplicate identity in design list".into()));
        }
        if let Some(id) = self.test_ids.iter().find(|id| design.contains(id)) {
            return Err(Error::Config(format!(
                "identity {id} appears in both design and test lists"
            )));
        }
        if self.n_train + self.n_val != self.design_ids.len() {
            return Err(Error::Config(format!(
                "n_train ({}) + n_val ({}) must equal the {} design identities",
                self.n_train,
                self.n_val,
                self.design_ids.len()
            )));
        }
        Ok(())
    }

    /// BIWI RGBD-ID partition: 32 train + 8 validation design identities, 38 test.
    pub fn biwi() -> Self {
        Self::new(
            parse_id_list(BIWI_DESIGN, "biwi/design.txt").expect("bundled split"),
            parse_id_list(BIWI_TEST, "biwi/test.txt").expect("bundled split"),
            8,
        )
        .expect("bundled split")
    }

    /// RobotPKU partition: 40 train + 10 validation design identities, 40 test.
    pub fn robotpku() -> Self {
        Self::new(
            parse_id_list(PKU_DESIGN, "robotpku/design.txt").expect("bundled split"),
            parse_id_list(PKU_TEST, "robotpku/test.txt").expect("bundled split"),
            10,
        )
        .expect("bundled split")
    }

    /// Reads `design.txt` and `test.txt` from `dir`.
    pub fn from_dir(dir: &Path, n_val: usize) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p)
                .map_err(|e| Error::io(&p, e))
                .and_then(|t| parse_id_list(&t, &p.display().to_string()))
        };
        Self::new(read("design.txt")?, read("test.txt")?, n_val)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, ids) in [("design.txt", &self.design_ids), ("test.txt", &self.test_ids)] {
            let mut text = String::new();
            for id in ids.iter() {
                text.push_str(&format!("{id}\n"));
            }
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    /// The last `n_test` labels of `0..n_identities` are held out for testing.
    pub fn synthetic(n_identities: u32, n_test: u32, n_val: usize) -> Result<Self> {
        if n_test >= n_identities {
            return Err(Error::Config(format!(
                "cannot hold out {n_test} of {n_identities} identities"
            )));
        }
        let cut = n_identities - n_test;
        Self::new((0..cut).collect(), (cut..n_identities).collect(), n_val)
    }
}

pub fn apply_split(index: &DatasetIndex, spec: &SplitSpec) -> Result<(DatasetIndex, DatasetIndex)> {
    spec.validate()?;
    if let Some(id) = spec
        .design_ids
        .iter()
        .chain(spec.test_ids.iter())
        .find(|id| !index.identities().contains(id))
    {
        return Err(Error::Config(format!(
            "split references identity {id}, which is not in dataset {}",
            index.name
        )));
    }
    let design: BTreeSet<u32> = spec.design_ids.iter().copied().collect();
    let test: BTreeSet<u32> = spec.test_ids.iter().copied().collect();
    Ok((
        index.restrict(format!("{}/design", index.name), &design),
        index.restrict(format!("{}/test", index.name), &test),
    ))
}

/// Splits the design subset into train and validation identities for one
/// cross-validation fold.
///
/// The design labels are shuffled once per seed; fold `f` takes the window
/// `[f * n_val, (f + 1) * n_val)` of that permutation (wrapping around), so
/// the three folds get distinct validation subsets whenever
/// `3 * n_val <= |design|`.
pub fn make_validation_fold(
    design: &DatasetIndex,
    spec: &SplitSpec,
    fold: usize,
    seed_value: u64,
) -> Result<(DatasetIndex, DatasetIndex)> {
    if fold >= N_FOLDS {
        return Err(Error::Config(format!("fold {fold} out of range 0..{N_FOLDS}")));
    }
    if spec.n_val == 0 || spec.n_val >= spec.design_ids.len() {
        return Err(Error::Config(format!(
            "n_val = {} must be in 1..{}",
            spec.n_val,
            spec.design_ids.len()
        )));
    }
    let mut ids = spec.design_ids.clone();
    ids.sort_unstable();
    ids.shuffle(&mut seed::rng_for(seed_value, "validation-fold", &[]));
    let n = ids.len();
    let val: BTreeSet<u32> = (0..spec.n_val).map(|i| ids[(fold * spec.n_val + i) % n]).collect();
    let train: BTreeSet<u32> = ids.iter().copied().filter(|id| !val.contains(id)).collect();
    Ok((
        design.restrict(format!("{}/train{fold}", design.name), &train),
        design.restrict(format!("{}/val{fold}", design.name), &val),
    ))
}
