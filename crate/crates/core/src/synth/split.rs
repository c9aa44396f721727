use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Part {
    Train,
    Val,
    Eval,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Train, Part::Val, Part::Eval];
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Part::Train => "train",
            Part::Val => "val",
            Part::Eval => "eval",
        })
    }
}

impl FromStr for Part {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Part::Train),
            "val" => Ok(Part::Val),
            "eval" => Ok(Part::Eval),
            _ => Err(Error::Dataset(format!("unknown split part {s:?}"))),
        }
    }
}

/// Sample ids per part. Every subject's images land in exactly one part.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub eval: Vec<usize>,
}

impl DatasetSplit {
    pub fn ids(&self, part: Part) -> &[usize] {
        match part {
            Part::Train => &self.train,
            Part::Val => &self.val,
            Part::Eval => &self.eval,
        }
    }

    fn ids_mut(&mut self, part: Part) -> &mut Vec<usize> {
        match part {
            Part::Train => &mut self.train,
            Part::Val => &mut self.val,
            Part::Eval => &mut self.eval,
        }
    }

    pub fn part_of(&self, id: usize) -> Option<Part> {
        Part::ALL.into_iter().find(|&p| self.ids(p).contains(&id))
    }

    pub fn push(&mut self, part: Part, id: usize) {
        self.ids_mut(part).push(id);
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.eval.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Shuffles subjects with `seed` and fills train, val and eval in turn until
/// each holds at least its fraction of the samples.
pub fn split_by_subject(samples: &[Sample], fractions: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|f| !(*f >= 0.0)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions must be non-negative and sum to 1, got {fr:?}")));
    }
    let mut subjects: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for s in samples {
        subjects.entry(s.subject_id).or_default().push(s.id);
    }
    if subjects.len() < Part::ALL.len() {
        return Err(Error::Dataset(format!(
            "{} subjects cannot be split into {} parts",
            subjects.len(),
            Part::ALL.len()
        )));
    }
    let mut order: Vec<Vec<usize>> = subjects.into_values().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let total = samples.len() as f64;
    let mut split = DatasetSplit::default();
    let mut part = 0;
    for ids in order {
        while part + 1 < Part::ALL.len() && split.ids(Part::ALL[part]).len() as f64 >= fr[part] * total {
            part += 1;
        }
        for id in ids {
            split.push(Part::ALL[part], id);
        }
    }
    for p in Part::ALL {
        split.ids_mut(p).sort_unstable();
    }
    Ok(split)
}
