//! Exact scoring of forced-choice responses.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::{SessionKind, VttError};

/// Hidden ground truth of a trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truth {
    Real,
    /// Reconstructed, progressed or regressed by the model.
    Synthetic,
}

/// A rater's judgment, normalized to the two classes.
pub type Answer = Truth;

/// Confusion counts: first letter truth, second letter answer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub real_as_real: u64,
    pub real_as_synthetic: u64,
    pub synthetic_as_real: u64,
    pub synthetic_as_synthetic: u64,
}

impl Tally {
    pub fn add(&mut self, truth: Truth, answer: Answer) {
        match (truth, answer) {
            (Truth::Real, Truth::Real) => self.real_as_real += 1,
            (Truth::Real, Truth::Synthetic) => self.real_as_synthetic += 1,
            (Truth::Synthetic, Truth::Real) => self.synthetic_as_real += 1,
            (Truth::Synthetic, Truth::Synthetic) => self.synthetic_as_synthetic += 1,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (Truth, Answer)>) -> Self {
        let mut t = Tally::default();
        for (truth, answer) in pairs {
            t.add(truth, answer);
        }
        t
    }

    pub fn real(&self) -> u64 {
        self.real_as_real + self.real_as_synthetic
    }

    pub fn synthetic(&self) -> u64 {
        self.synthetic_as_real + self.synthetic_as_synthetic
    }

    pub fn total(&self) -> u64 {
        self.real() + self.synthetic()
    }

    pub fn correct(&self) -> u64 {
        self.real_as_real + self.synthetic_as_synthetic
    }
}

/// `100 · num / den`, kept exact. `None` when nothing was counted.
fn percent(num: u64, den: u64) -> Option<Ratio<u64>> {
    (den > 0).then(|| Ratio::new(100 * num, den))
}

/// Nearest integer, halves rounded up.
pub fn display_percent(p: &Ratio<u64>) -> u64 {
    p.round().to_integer()
}

fn exact_string(p: &Ratio<u64>) -> String {
    if p.is_integer() {
        p.to_integer().to_string()
    } else {
        format!("{}/{}", p.numer(), p.denom())
    }
}

/// One report column, exact and rounded for display.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    /// Rounded percentage; `null` when the column has no answers.
    pub percent: Option<u64>,
    /// Exact percentage as an integer or `num/den`.
    pub exact: Option<String>,
}

impl Column {
    fn new(name: &str, value: Option<Ratio<u64>>) -> Self {
        Self {
            name: name.to_string(),
            percent: value.as_ref().map(display_percent),
            exact: value.as_ref().map(exact_string),
        }
    }
}

pub const REALISM_COLUMNS: [&str; 5] = ["Accuracy", "R as R", "R as S", "S as R", "S as S"];
pub const AGE_SHIFT_COLUMNS: [&str; 3] = ["Accuracy", "Progression", "Regression"];

/// Exact percentages of one session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionScore {
    pub kind: SessionKind,
    pub tally: Tally,
    pub accuracy: Ratio<u64>,
    pub r_as_r: Option<Ratio<u64>>,
    pub r_as_s: Option<Ratio<u64>>,
    pub s_as_r: Option<Ratio<u64>>,
    pub s_as_s: Option<Ratio<u64>>,
}

pub fn score(kind: SessionKind, tally: Tally) -> Result<SessionScore, VttError> {
    let accuracy = percent(tally.correct(), tally.total())
        .ok_or_else(|| VttError::Empty("no answered trials to score".into()))?;
    Ok(SessionScore {
        kind,
        tally,
        accuracy,
        r_as_r: percent(tally.real_as_real, tally.real()),
        r_as_s: percent(tally.real_as_synthetic, tally.real()),
        s_as_r: percent(tally.synthetic_as_real, tally.synthetic()),
        s_as_s: percent(tally.synthetic_as_synthetic, tally.synthetic()),
    })
}

impl SessionScore {
    /// Table columns for this session alone. Realism sessions give the five
    /// realism columns; age-shift sessions give accuracy plus their own
    /// column (equal to the accuracy).
    pub fn columns(&self) -> Vec<Column> {
        match self.kind {
            SessionKind::Realism => vec![
                Column::new(REALISM_COLUMNS[0], Some(self.accuracy)),
                Column::new(REALISM_COLUMNS[1], self.r_as_r),
                Column::new(REALISM_COLUMNS[2], self.r_as_s),
                Column::new(REALISM_COLUMNS[3], self.s_as_r),
                Column::new(REALISM_COLUMNS[4], self.s_as_s),
            ],
            SessionKind::Progression => vec![
                Column::new("Accuracy", Some(self.accuracy)),
                Column::new("Progression", Some(self.accuracy)),
            ],
            SessionKind::Regression => vec![
                Column::new("Accuracy", Some(self.accuracy)),
                Column::new("Regression", Some(self.accuracy)),
            ],
        }
    }
}

/// Progression and regression sessions of the same rater combined: the
/// accuracy column is the mean of the two session accuracies.
pub fn age_shift_columns(progression: &SessionScore, regression: &SessionScore) -> Result<Vec<Column>, VttError> {
    if progression.kind != SessionKind::Progression || regression.kind != SessionKind::Regression {
        return Err(VttError::BadRequest(format!(
            "age-shift report needs a progression and a regression session, got {} and {}",
            progression.kind.as_str(),
            regression.kind.as_str()
        )));
    }
    let mean = (progression.accuracy + regression.accuracy) / 2;
    Ok(vec![
        Column::new(AGE_SHIFT_COLUMNS[0], Some(mean)),
        Column::new(AGE_SHIFT_COLUMNS[1], Some(progression.accuracy)),
        Column::new(AGE_SHIFT_COLUMNS[2], Some(regression.accuracy)),
    ])
}
