//! Subject-wise fold planning.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::EmbeddingClip;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignments: BTreeMap<String, usize>,
}

/// Clip indices of one train/validation/test rotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub test_fold: usize,
    pub val_fold: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles the distinct subjects with `seed` and deals them round-robin into
/// `k` folds. Subjects are sorted before shuffling, so the plan depends only
/// on the set of subject ids, never on clip order.
pub fn subject_kfold(clips: &[EmbeddingClip], k: usize, seed: u64) -> Result<FoldPlan> {
    let subjects: BTreeSet<&str> = clips.iter().map(|c| c.subject_id.as_str()).collect();
    plan_for_subjects(subjects.into_iter(), k, seed)
}

pub fn plan_for_subjects<'a>(subjects: impl Iterator<Item = &'a str>, k: usize, seed: u64) -> Result<FoldPlan> {
    let mut subjects: Vec<&str> = subjects.collect::<BTreeSet<_>>().into_iter().collect();
    if k < 2 {
        return Err(Error::Config(format!("need k >= 2 folds, got {k}")));
    }
    if subjects.len() < k {
        return Err(Error::Config(format!(
            "{} distinct subjects cannot fill {k} folds",
            subjects.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);
    let assignments = subjects
        .iter()
        .enumerate()
        .map(|(i, s)| (s.to_string(), i % k))
        .collect();
    Ok(FoldPlan { k, seed, assignments })
}

impl FoldPlan {
    pub fn fold_of(&self, subject: &str) -> Option<usize> {
        self.assignments.get(subject).copied()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// Rotation `test_fold`: that fold is test, the next fold (mod k) is
    /// validation, the rest is training.
    pub fn split(&self, clips: &[EmbeddingClip], test_fold: usize) -> Result<Split> {
        if self.k < 3 {
            return Err(Error::Config(format!(
                "a train/val/test rotation needs k >= 3, got {}",
                self.k
            )));
        }
        if test_fold >= self.k {
            return Err(Error::Config(format!("fold {test_fold} out of range for k={}", self.k)));
        }
        let val_fold = (test_fold + 1) % self.k;
        let mut split = Split {
            test_fold,
            val_fold,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for (i, c) in clips.iter().enumerate() {
            let f = self
                .fold_of(&c.subject_id)
                .ok_or_else(|| Error::Config(format!("subject {} missing from fold plan", c.subject_id)))?;
            if f == test_fold {
                split.test.push(i);
            } else if f == val_fold {
                split.val.push(i);
            } else {
                split.train.push(i);
            }
        }
        Ok(split)
    }
}

/// Subjects that appear in more than one part of `split`.
pub fn leakage_scan(clips: &[EmbeddingClip], split: &Split) -> Vec<String> {
    let part = |idx: &[usize]| -> BTreeSet<&str> { idx.iter().map(|&i| clips[i].subject_id.as_str()).collect() };
    let (tr, va, te) = (part(&split.train), part(&split.val), part(&split.test));
    let mut leaked: BTreeSet<&str> = tr.intersection(&va).copied().collect();
    leaked.extend(tr.intersection(&te));
    leaked.extend(va.intersection(&te));
    leaked.into_iter().map(String::from).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::TaskTag;
    use crate::numerics::Sequence;

    fn clips(subjects: usize, per_subject: usize) -> Vec<EmbeddingClip> {
        let mut out = Vec::new();
        for s in 0..subjects {
            for c in 0..per_subject {
                out.push(EmbeddingClip {
                    clip_id: format!("s{s}_c{c}"),
                    subject_id: format!("s{s}"),
                    task_tag: TaskTag::Speech,
                    video: Sequence::from_vec(2, 1, vec![0.0, 0.0]).unwrap(),
                    audio: None,
                    diagnosis: 0,
                    severity_level: 0,
                    severity_score: None,
                });
            }
        }
        out
    }

    #[test]
    fn ten_subjects_five_folds() {
        let plan = subject_kfold(&clips(10, 3), 5, 1).unwrap();
        assert_eq!(plan.fold_sizes(), vec![2; 5]);
    }

    #[test]
    fn deterministic_per_seed() {
        let c = clips(13, 2);
        assert_eq!(subject_kfold(&c, 5, 9).unwrap(), subject_kfold(&c, 5, 9).unwrap());
        assert_ne!(subject_kfold(&c, 5, 9).unwrap(), subject_kfold(&c, 5, 10).unwrap());
    }

    #[test]
    fn too_few_subjects() {
        assert!(matches!(subject_kfold(&clips(4, 2), 5, 0), Err(Error::Config(_))));
    }

    #[test]
    fn brute_force_scan_finds_no_leakage() {
        let c = clips(17, 4);
        let plan = subject_kfold(&c, 5, 3).unwrap();
        let sizes = plan.fold_sizes();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for f in 0..5 {
            let s = plan.split(&c, f).unwrap();
            assert_eq!(s.train.len() + s.val.len() + s.test.len(), c.len());
            // Independent O(n²) scan over clip pairs.
            let part_of = |i: usize| {
                if s.test.contains(&i) {
                    0
                } else if s.val.contains(&i) {
                    1
                } else {
                    2
                }
            };
            for i in 0..c.len() {
                for j in 0..c.len() {
                    if c[i].subject_id == c[j].subject_id {
                        assert_eq!(part_of(i), part_of(j));
                    }
                }
            }
            assert!(leakage_scan(&c, &s).is_empty());
        }
    }

    #[test]
    fn clip_order_does_not_change_assignment() {
        let c = clips(11, 3);
        let mut reversed = c.clone();
        reversed.reverse();
        assert_eq!(subject_kfold(&c, 5, 4).unwrap(), subject_kfold(&reversed, 5, 4).unwrap());
    }
}
