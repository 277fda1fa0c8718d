use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Fold {
    pub subject: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// One fold per subject, ordered by subject id.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LosoPlan {
    pub folds: Vec<Fold>,
}

impl LosoPlan {
    pub fn fold(&self, subject: &str) -> Option<&Fold> {
        self.folds.iter().find(|f| f.subject == subject)
    }
}

/// Splits sample indices by subject: each fold tests on one subject and
/// trains on all the others.
pub fn loso_split<S: AsRef<str>>(subjects: &[S]) -> Result<LosoPlan> {
    let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in subjects.iter().enumerate() {
        by_subject.entry(s.as_ref()).or_default().push(i);
    }
    if by_subject.len() < 2 {
        return Err(Error::Invalid(format!(
            "leave-one-subject-out needs at least 2 subjects, got {}",
            by_subject.len()
        )));
    }
    let folds = by_subject
        .iter()
        .map(|(&subject, test)| Fold {
            subject: subject.to_string(),
            train: (0..subjects.len())
                .filter(|&i| subjects[i].as_ref() != subject)
                .collect(),
            test: test.clone(),
        })
        .collect();
    Ok(LosoPlan { folds })
}
