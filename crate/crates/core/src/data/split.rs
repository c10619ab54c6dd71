use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::DatasetManifest;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// Fraction of the manifest held out as test set 1 (85 of 425 by default).
    pub test_fraction: f64,
    /// Fraction of the remaining images used for validation.
    pub val_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            test_fraction: 0.2,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test1,
    Test2,
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test1" | "test" => Ok(SplitName::Test1),
            "test2" => Ok(SplitName::Test2),
            other => Err(Error::Config(format!("unknown split {other}"))),
        }
    }
}

/// Image ids per split. `test2` is `test1` without implant and
/// supernumerary (category 5 and 6) images.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test1: Vec<String>,
    pub test2: Vec<String>,
}

impl Splits {
    pub fn get(&self, name: SplitName) -> &[String] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test1 => &self.test1,
            SplitName::Test2 => &self.test2,
        }
    }
}

/// Largest-remainder apportionment of `total` over `counts`, computed in
/// integers; ties go to the lower index.
fn apportion(counts: &[usize], total: usize) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return vec![0; counts.len()];
    }
    let mut quota: Vec<usize> = counts.iter().map(|&c| c * total / n).collect();
    let mut left = total - quota.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| ((counts[b] * total) % n).cmp(&((counts[a] * total) % n)).then(a.cmp(&b)));
    for i in order {
        if left == 0 {
            break;
        }
        if quota[i] < counts[i] {
            quota[i] += 1;
            left -= 1;
        }
    }
    quota
}

/// Category-stratified, seed-deterministic train/val/test split.
pub fn make_splits(manifest: &DatasetManifest, seed: u64, config: &SplitConfig) -> Result<Splits> {
    if manifest.is_empty() {
        return Err(Error::Dataset("cannot split an empty manifest".into()));
    }
    let mut by_cat: Vec<Vec<String>> = vec![Vec::new(); 10];
    for e in &manifest.entries {
        by_cat[e.category.id() as usize - 1].push(e.image_id.clone());
    }
    for (i, ids) in by_cat.iter_mut().enumerate() {
        if ids.is_empty() {
            warn!("category {} has no images in the manifest", i + 1);
        }
        ids.sort();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ids in by_cat.iter_mut() {
        ids.shuffle(&mut rng);
    }

    let counts: Vec<usize> = by_cat.iter().map(Vec::len).collect();
    let n = manifest.len();
    let n_test = (n as f64 * config.test_fraction).round() as usize;
    let test_quota = apportion(&counts, n_test);
    let rest: Vec<usize> = counts.iter().zip(&test_quota).map(|(c, t)| c - t).collect();
    let n_val = (rest.iter().sum::<usize>() as f64 * config.val_fraction).round() as usize;
    let val_quota = apportion(&rest, n_val);

    let mut splits = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test1: Vec::new(),
        test2: Vec::new(),
    };
    for (cat, ids) in by_cat.iter().enumerate() {
        let (t, v) = (test_quota[cat], val_quota[cat]);
        splits.test1.extend_from_slice(&ids[..t]);
        if cat != 4 && cat != 5 {
            splits.test2.extend_from_slice(&ids[..t]);
        }
        splits.val.extend_from_slice(&ids[t..t + v]);
        splits.train.extend_from_slice(&ids[t + v..]);
    }
    for list in [&mut splits.train, &mut splits.val, &mut splits.test1, &mut splits.test2] {
        list.sort();
    }
    Ok(splits)
}
