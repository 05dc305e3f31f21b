use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::signal::TrialMeta;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    IntraSession,
    InterSession,
    InterSubject,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::IntraSession => "intra_session",
            Scenario::InterSession => "inter_session",
            Scenario::InterSubject => "inter_subject",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace(['-', '_'], "").as_str() {
            "intra" | "intrasession" => Ok(Scenario::IntraSession),
            "intersession" => Ok(Scenario::InterSession),
            "intersubject" => Ok(Scenario::InterSubject),
            _ => Err(Error::Config(format!("unknown scenario '{s}'"))),
        }
    }
}

/// Share of the five odd-indexed adaptation trials used for adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AdaptationBudget {
    T1,
    T2,
    T3,
    T4,
    T5,
}

impl AdaptationBudget {
    pub const ALL: [AdaptationBudget; 5] = [Self::T1, Self::T2, Self::T3, Self::T4, Self::T5];

    pub fn trials(self) -> usize {
        self as usize + 1
    }

    pub fn fraction(self) -> f64 {
        self.trials() as f64 / 5.0
    }
}

impl fmt::Display for AdaptationBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}", self.trials())
    }
}

impl FromStr for AdaptationBudget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "T1" => Ok(Self::T1),
            "T2" => Ok(Self::T2),
            "T3" => Ok(Self::T3),
            "T4" => Ok(Self::T4),
            "T5" => Ok(Self::T5),
            _ => Err(Error::Config(format!("unknown budget '{s}' (expected T1..T5)"))),
        }
    }
}

/// Trial roles of one cross-validation fold. In the intra-session scenario
/// `pretrain` holds the from-scratch training trials and `adaptation` is empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub subject: u16,
    pub session: u8,
    pub pretrain: Vec<TrialMeta>,
    pub adaptation: Vec<TrialMeta>,
    pub validation: Vec<TrialMeta>,
    pub test: Vec<TrialMeta>,
}

impl Fold {
    fn roles(&self) -> [(&'static str, &[TrialMeta]); 4] {
        [
            ("pretrain", &self.pretrain),
            ("adaptation", &self.adaptation),
            ("validation", &self.validation),
            ("test", &self.test),
        ]
    }

    /// Every trial that may contribute a gradient step.
    pub fn training_trials(&self) -> impl Iterator<Item = &TrialMeta> {
        self.pretrain.iter().chain(&self.adaptation)
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let roles = self.roles();
        for i in 0..roles.len() {
            let a: BTreeSet<_> = roles[i].1.iter().collect();
            if a.len() != roles[i].1.len() {
                return Err(Error::Split(format!("fold {}: duplicate trial in {}", self.index, roles[i].0)));
            }
            for other in &roles[i + 1..] {
                if let Some(m) = other.1.iter().find(|m| a.contains(m)) {
                    return Err(Error::Split(format!(
                        "fold {}: {m:?} appears in both {} and {}",
                        self.index, roles[i].0, other.0
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub scenario: Scenario,
    pub budget: Option<AdaptationBudget>,
    pub folds: Vec<Fold>,
}

impl SplitPlan {
    fn checked(self) -> Result<Self> {
        let mut tested = BTreeSet::new();
        for f in &self.folds {
            f.check_disjoint()?;
            for m in &f.test {
                if !tested.insert(*m) {
                    return Err(Error::Split(format!("{m:?} is a test trial in more than one fold")));
                }
            }
        }
        Ok(self)
    }
}

type Index = BTreeMap<(u16, u8), BTreeMap<u16, BTreeSet<u8>>>;

/// (subject, session) → gesture → trial indices present.
fn index(manifest: &DatasetManifest) -> Index {
    let mut idx: Index = BTreeMap::new();
    for m in manifest.metas() {
        idx.entry((m.subject, m.session))
            .or_default()
            .entry(m.gesture)
            .or_default()
            .insert(m.trial);
    }
    idx
}

/// Errors listing every missing (gesture, trial) of one recording session.
fn require_complete(manifest: &DatasetManifest, idx: &Index, subject: u16, session: u8) -> Result<()> {
    let empty = BTreeMap::new();
    let present = idx.get(&(subject, session)).unwrap_or(&empty);
    let mut gaps = Vec::new();
    for g in 0..manifest.gestures as u16 {
        for t in 1..=manifest.trials_per_gesture {
            if !present.get(&g).is_some_and(|s| s.contains(&t)) {
                gaps.push(format!("g{g}/t{t}"));
            }
        }
    }
    if gaps.is_empty() {
        Ok(())
    } else {
        Err(Error::Split(format!(
            "subject {subject} session {session} is missing {} trials: {}",
            gaps.len(),
            gaps.join(", ")
        )))
    }
}

fn session_trials(manifest: &DatasetManifest, subject: u16, session: u8, keep: impl Fn(u8) -> bool) -> Vec<TrialMeta> {
    let mut v: Vec<TrialMeta> = manifest
        .metas()
        .filter(|m| m.subject == subject && m.session == session && keep(m.trial))
        .collect();
    v.sort();
    v
}

/// First `budget.trials()` odd-indexed trials per gesture, plus the even ones.
fn odd_even(manifest: &DatasetManifest, subject: u16, session: u8, budget: AdaptationBudget) -> Result<(Vec<TrialMeta>, Vec<TrialMeta>)> {
    let odd: Vec<u8> = (1..=manifest.trials_per_gesture).filter(|t| t % 2 == 1).collect();
    if odd.len() < budget.trials() {
        return Err(Error::Split(format!(
            "budget {budget} needs {} odd trials per gesture; only {} exist",
            budget.trials(),
            odd.len()
        )));
    }
    let chosen: BTreeSet<u8> = odd[..budget.trials()].iter().copied().collect();
    let adaptation = session_trials(manifest, subject, session, |t| chosen.contains(&t));
    let test = session_trials(manifest, subject, session, |t| t % 2 == 0);
    Ok((adaptation, test))
}

/// Leave-one-trial-out per (subject, session): fold `i` tests trial `i`,
/// validates on the next trial index (cyclically) and trains on the rest.
pub fn make_intra_session_splits(manifest: &DatasetManifest) -> Result<SplitPlan> {
    let n = manifest.trials_per_gesture;
    if n < 3 {
        return Err(Error::Split(format!("leave-one-trial-out needs at least 3 trials, manifest has {n}")));
    }
    let idx = index(manifest);
    let mut folds = Vec::new();
    for &(subject, session) in idx.keys() {
        require_complete(manifest, &idx, subject, session)?;
        for i in 1..=n {
            let val = i % n + 1;
            folds.push(Fold {
                index: folds.len(),
                subject,
                session,
                pretrain: session_trials(manifest, subject, session, |t| t != i && t != val),
                adaptation: Vec::new(),
                validation: session_trials(manifest, subject, session, |t| t == val),
                test: session_trials(manifest, subject, session, |t| t == i),
            });
        }
    }
    SplitPlan {
        scenario: Scenario::IntraSession,
        budget: None,
        folds,
    }
    .checked()
}

/// Per subject: pretrain on the first session, adapt on odd trials of the
/// second session, test on its even trials.
pub fn make_inter_session_split(manifest: &DatasetManifest, budget: AdaptationBudget) -> Result<SplitPlan> {
    let idx = index(manifest);
    let subjects: BTreeSet<u16> = idx.keys().map(|k| k.0).collect();
    let mut folds = Vec::new();
    for subject in subjects {
        let sessions: Vec<u8> = idx.keys().filter(|k| k.0 == subject).map(|k| k.1).collect();
        let [first, second, ..] = sessions[..] else {
            return Err(Error::Split(format!("subject {subject} has no second session")));
        };
        require_complete(manifest, &idx, subject, first)?;
        require_complete(manifest, &idx, subject, second)?;
        let (adaptation, test) = odd_even(manifest, subject, second, budget)?;
        folds.push(Fold {
            index: folds.len(),
            subject,
            session: second,
            pretrain: session_trials(manifest, subject, first, |_| true),
            adaptation,
            validation: Vec::new(),
            test,
        });
    }
    if folds.is_empty() {
        return Err(Error::Split("manifest has no trials".into()));
    }
    SplitPlan {
        scenario: Scenario::InterSession,
        budget: Some(budget),
        folds,
    }
    .checked()
}

/// Leave-one-subject-out on the highest-numbered session.
pub fn make_inter_subject_splits(manifest: &DatasetManifest, budget: AdaptationBudget) -> Result<SplitPlan> {
    let idx = index(manifest);
    let session = idx
        .keys()
        .map(|k| k.1)
        .max()
        .ok_or_else(|| Error::Split("manifest has no trials".into()))?;
    let subjects: Vec<u16> = idx.keys().filter(|k| k.1 == session).map(|k| k.0).collect();
    if subjects.len() < 2 {
        return Err(Error::Split(format!(
            "leave-one-subject-out needs at least 2 subjects in session {session}, found {}",
            subjects.len()
        )));
    }
    let mut folds = Vec::new();
    for &held_out in &subjects {
        require_complete(manifest, &idx, held_out, session)?;
        let (adaptation, test) = odd_even(manifest, held_out, session, budget)?;
        let pretrain = subjects
            .iter()
            .filter(|s| **s != held_out)
            .flat_map(|s| session_trials(manifest, *s, session, |_| true))
            .collect();
        folds.push(Fold {
            index: folds.len(),
            subject: held_out,
            session,
            pretrain,
            adaptation,
            validation: Vec::new(),
            test,
        });
    }
    SplitPlan {
        scenario: Scenario::InterSubject,
        budget: Some(budget),
        folds,
    }
    .checked()
}

pub fn make_splits(manifest: &DatasetManifest, scenario: Scenario, budget: AdaptationBudget) -> Result<SplitPlan> {
    match scenario {
        Scenario::IntraSession => make_intra_session_splits(manifest),
        Scenario::InterSession => make_inter_session_split(manifest, budget),
        Scenario::InterSubject => make_inter_subject_splits(manifest, budget),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TrialEntry;

    fn manifest(subjects: &[u16], sessions: &[u8], gestures: usize, trials: u8) -> DatasetManifest {
        let mut entries = Vec::new();
        for &subject in subjects {
            for &session in sessions {
                for gesture in 0..gestures as u16 {
                    for trial in 1..=trials {
                        entries.push(TrialEntry {
                            path: String::new(),
                            meta: TrialMeta { subject, session, gesture, trial },
                        });
                    }
                }
            }
        }
        DatasetManifest::new("t", gestures, subjects.to_vec(), sessions.to_vec(), trials, 1000, entries)
    }

    #[test]
    fn intra_rotation() {
        let m = manifest(&[1], &[1], 8, 10);
        let plan = make_intra_session_splits(&m).unwrap();
        assert_eq!(plan.folds.len(), 10);
        let mut tested = BTreeSet::new();
        for (i, f) in plan.folds.iter().enumerate() {
            assert_eq!(f.pretrain.len(), 8 * 8);
            assert_eq!(f.validation.len(), 8);
            assert_eq!(f.test.len(), 8);
            assert!(f.test.iter().all(|t| t.trial as usize == i + 1));
            assert!(f.validation.iter().all(|t| t.trial as usize == (i + 1) % 10 + 1));
            tested.extend(f.test.iter().map(|t| t.trial));
        }
        assert_eq!(tested, (1..=10).collect());
    }

    #[test]
    fn intra_reports_gaps() {
        let mut m = manifest(&[1], &[1], 2, 10);
        m.trials.retain(|e| !(e.meta.gesture == 1 && e.meta.trial == 4));
        let err = make_intra_session_splits(&m).unwrap_err().to_string();
        assert!(err.contains("g1/t4"), "{err}");
    }

    #[test]
    fn inter_session_budgets() {
        let m = manifest(&[1, 2], &[1, 2], 3, 10);
        for b in AdaptationBudget::ALL {
            let plan = make_inter_session_split(&m, b).unwrap();
            assert_eq!(plan.folds.len(), 2);
            for f in &plan.folds {
                assert_eq!(f.adaptation.len(), 3 * b.trials());
                assert_eq!(f.test.len(), 3 * 5);
                assert!(f.pretrain.iter().all(|t| t.session == 1 && t.subject == f.subject));
                assert!(f.adaptation.iter().all(|t| t.session == 2 && t.trial % 2 == 1));
                assert!(f.test.iter().all(|t| t.session == 2 && t.trial % 2 == 0));
            }
        }
        let t1 = make_inter_session_split(&m, AdaptationBudget::T1).unwrap();
        assert!(t1.folds[0].adaptation.iter().all(|t| t.trial == 1));
    }

    #[test]
    fn inter_session_needs_two_sessions() {
        let m = manifest(&[1], &[1], 3, 10);
        assert!(make_inter_session_split(&m, AdaptationBudget::T1).is_err());
    }

    #[test]
    fn inter_subject_leaves_one_out() {
        let subjects: Vec<u16> = (1..=10).collect();
        let m = manifest(&subjects, &[1, 2], 2, 10);
        let plan = make_inter_subject_splits(&m, AdaptationBudget::T1).unwrap();
        assert_eq!(plan.folds.len(), 10);
        for f in &plan.folds {
            assert!(f.pretrain.iter().all(|t| t.subject != f.subject && t.session == 2));
            assert_eq!(f.pretrain.len(), 9 * 2 * 10);
            assert_eq!(f.adaptation.len(), 2);
            assert!(f.adaptation.iter().all(|t| t.trial == 1 && t.subject == f.subject));
        }
        let single = manifest(&[1], &[1, 2], 2, 10);
        assert!(make_inter_subject_splits(&single, AdaptationBudget::T1).is_err());
    }

    #[test]
    fn overlap_detected() {
        let mut f = make_intra_session_splits(&manifest(&[1], &[1], 2, 4)).unwrap().folds[0].clone();
        f.pretrain.push(f.test[0]);
        assert!(matches!(f.check_disjoint(), Err(Error::Split(_))));
    }

    #[test]
    fn budget_parsing() {
        assert_eq!("t3".parse::<AdaptationBudget>().unwrap(), AdaptationBudget::T3);
        assert_eq!(AdaptationBudget::T4.fraction(), 0.8);
        assert!("T6".parse::<AdaptationBudget>().is_err());
        assert_eq!("intersession".parse::<Scenario>().unwrap(), Scenario::InterSession);
        assert_eq!("intra".parse::<Scenario>().unwrap(), Scenario::IntraSession);
    }
}
