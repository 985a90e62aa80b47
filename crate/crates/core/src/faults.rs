//! Deliberate defects used to check that the verification suite can catch real bugs.

use std::fmt;
use std::str::FromStr;

use crate::error::Error;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Faults {
    /// `merge_lse` subtracts the correction term instead of adding it.
    pub merge_sign_flip: bool,
    /// `ring_schedule` returns `(i + j) mod n`.
    pub schedule_off_by_one: bool,
    /// `tile_lse` exponentiates raw similarities without subtracting the row max.
    pub no_max_shift: bool,
}

impl Faults {
    pub const NONE: Faults = Faults {
        merge_sign_flip: false,
        schedule_off_by_one: false,
        no_max_shift: false,
    };

    pub fn any(&self) -> bool {
        self.merge_sign_flip || self.schedule_off_by_one || self.no_max_shift
    }
}

/// A single named fault, as selected on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    MergeSignFlip,
    ScheduleOffByOne,
    NoMaxShift,
}

impl Fault {
    pub const ALL: [Fault; 3] = [Fault::MergeSignFlip, Fault::ScheduleOffByOne, Fault::NoMaxShift];
}

impl From<Fault> for Faults {
    fn from(f: Fault) -> Self {
        std::iter::once(f).collect()
    }
}

impl FromIterator<Fault> for Faults {
    fn from_iter<I: IntoIterator<Item = Fault>>(iter: I) -> Self {
        iter.into_iter().fold(Faults::NONE, |mut acc, f| {
            match f {
                Fault::MergeSignFlip => acc.merge_sign_flip = true,
                Fault::ScheduleOffByOne => acc.schedule_off_by_one = true,
                Fault::NoMaxShift => acc.no_max_shift = true,
            }
            acc
        })
    }
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fault::MergeSignFlip => "merge-sign-flip",
            Fault::ScheduleOffByOne => "schedule-off-by-one",
            Fault::NoMaxShift => "no-max-shift",
        })
    }
}

impl FromStr for Fault {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        Fault::ALL
            .into_iter()
            .find(|f| f.to_string() == s)
            .ok_or_else(|| Error::Argument(format!("unknown fault `{s}`")))
    }
}
