use serde::{Deserialize, Serialize};

/// One poll of the fuzzer's counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct FuzzStatsSample {
    pub relative_time_s: u64,
    pub crashes_saved: u64,
    pub edges_found: u64,
    pub execs_done: u64,
    pub cycles_done: u64,
}

impl FuzzStatsSample {
    /// True when no monotone counter went backwards from `prev`.
    pub fn follows(&self, prev: &FuzzStatsSample) -> bool {
        self.relative_time_s >= prev.relative_time_s
            && self.crashes_saved >= prev.crashes_saved
            && self.edges_found >= prev.edges_found
            && self.execs_done >= prev.execs_done
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StatsParseError {
    #[error("stats text has no run_time/relative_time key")]
    MissingTime,
    #[error("bad value for {key}: {value:?}")]
    BadValue { key: String, value: String },
}

/// Parses the `key : value` stats file written by AFL-style fuzzers.
///
/// Unknown keys are ignored; counters other than the time default to 0.
pub fn parse_stats(text: &str) -> Result<FuzzStatsSample, StatsParseError> {
    let mut sample = FuzzStatsSample::default();
    let mut saw_time = false;
    let mut saw_saved = false;
    for line in text.lines() {
        let Some((key, value)) = line.split_once(':') else {
            continue;
        };
        let (key, value) = (key.trim(), value.trim());
        let slot = match key {
            "run_time" | "relative_time" => {
                saw_time = true;
                &mut sample.relative_time_s
            }
            "saved_crashes" => {
                saw_saved = true;
                &mut sample.crashes_saved
            }
            // pre-4.0 AFL++ name for the same counter
            "unique_crashes" if !saw_saved => &mut sample.crashes_saved,
            "edges_found" => &mut sample.edges_found,
            "execs_done" => &mut sample.execs_done,
            "cycles_done" => &mut sample.cycles_done,
            _ => continue,
        };
        *slot = value.parse().map_err(|_| StatsParseError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        })?;
    }
    if !saw_time {
        return Err(StatsParseError::MissingTime);
    }
    Ok(sample)
}
