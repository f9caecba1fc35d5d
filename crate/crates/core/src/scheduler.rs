//! Per-epoch sample difficulty: the fraction `rho_t` of each target list
//! that the masker hides.
//!
//! The naive scheduler always trains at full difficulty. The step-wise
//! scheduler cuts training into `S` equal units of epochs and trains unit
//! `s` (1-based) at `rho_t = s / S`; leftover epochs join the last unit.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Naive,
    Stepwise,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Naive => "naive",
            ScheduleKind::Stepwise => "stepwise",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(ScheduleKind::Naive),
            "stepwise" => Ok(ScheduleKind::Stepwise),
            other => Err(Error::invalid(format!("unknown scheduler `{other}`"))),
        }
    }
}

pub fn difficulty_at(
    kind: ScheduleKind,
    epoch: usize,
    total_epochs: usize,
    steps: usize,
) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(Error::invalid(format!(
            "epoch {epoch} outside 0..{total_epochs}"
        )));
    }
    if steps == 0 {
        return Err(Error::invalid("curriculum needs at least one step"));
    }
    if steps > total_epochs {
        return Err(Error::invalid(format!(
            "{steps} curriculum steps do not fit into {total_epochs} epochs"
        )));
    }
    Ok(match kind {
        ScheduleKind::Naive => 1.0,
        ScheduleKind::Stepwise => {
            let unit = total_epochs / steps;
            let step = (epoch / unit).min(steps - 1) + 1;
            step as f64 / steps as f64
        }
    })
}

/// The full trajectory of `rho_t` over a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultySchedule {
    pub kind: ScheduleKind,
    pub total_epochs: usize,
    pub steps: usize,
    pub values: Vec<f64>,
}

impl DifficultySchedule {
    pub fn new(kind: ScheduleKind, total_epochs: usize, steps: usize) -> Result<Self> {
        let values = (0..total_epochs)
            .map(|e| difficulty_at(kind, e, total_epochs, steps))
            .collect::<Result<Vec<_>>>()?;
        Ok(DifficultySchedule {
            kind,
            total_epochs,
            steps,
            values,
        })
    }

    pub fn at(&self, epoch: usize) -> f64 {
        self.values[epoch]
    }

    /// `epoch,rho_t` rows with a header line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "epoch,rho_t")?;
        for (epoch, rho) in self.values.iter().enumerate() {
            writeln!(out, "{epoch},{rho}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_step_equals_naive() {
        let a = DifficultySchedule::new(ScheduleKind::Stepwise, 17, 1).unwrap();
        let b = DifficultySchedule::new(ScheduleKind::Naive, 17, 1).unwrap();
        assert_eq!(a.values, b.values);
        assert!(a.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn five_steps_over_two_hundred_epochs() {
        let s = DifficultySchedule::new(ScheduleKind::Stepwise, 200, 5).unwrap();
        for (epoch, &v) in s.values.iter().enumerate() {
            let expected = [0.2, 0.4, 0.6, 0.8, 1.0][epoch / 40];
            assert_eq!(v, expected, "epoch {epoch}");
        }
    }

    #[test]
    fn remainder_joins_last_unit() {
        let s = DifficultySchedule::new(ScheduleKind::Stepwise, 11, 3).unwrap();
        let third = 1.0 / 3.0;
        let two_thirds = 2.0 / 3.0;
        assert_eq!(
            s.values,
            vec![third, third, third, two_thirds, two_thirds, two_thirds, 1.0, 1.0, 1.0, 1.0, 1.0]
        );
    }

    #[test]
    fn too_many_steps_rejected() {
        assert!(difficulty_at(ScheduleKind::Stepwise, 0, 3, 4).is_err());
        assert!(difficulty_at(ScheduleKind::Stepwise, 3, 3, 1).is_err());
    }

    #[test]
    fn csv_dump() {
        let s = DifficultySchedule::new(ScheduleKind::Stepwise, 4, 2).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,rho_t\n0,0.5\n1,0.5\n2,1\n3,1\n"
        );
    }

    proptest! {
        #[test]
        fn monotone_and_ends_at_one(total in 1usize..300, steps_frac in 0.0f64..1.0) {
            let steps = 1 + ((total - 1) as f64 * steps_frac) as usize;
            let s = DifficultySchedule::new(ScheduleKind::Stepwise, total, steps).unwrap();
            prop_assert!(s.values.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(*s.values.last().unwrap(), 1.0);
            prop_assert!(s.values.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }
}
