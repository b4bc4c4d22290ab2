//! Attack campaigns: one attack per image over a shared, immutable victim.

use rayon::prelude::*;

use crate::attack::{attack, AttackConfig, AttackResult, TargetRange};
use crate::dataset::Sample;
use crate::error::Error;
use crate::metrics::AttackRecord;
use crate::model::VictimNetwork;

#[derive(Debug)]
pub struct CampaignOutcome {
    /// Sorted by image id.
    pub records: Vec<AttackRecord>,
    /// Kept alongside the records, same order.
    pub results: Vec<AttackResult>,
    /// Per-image errors, sorted by image id.
    pub errors: Vec<(String, Error)>,
}

/// Attack every sample. Output order depends only on image ids, never on scheduling.
pub fn run_campaign(
    net: &VictimNetwork,
    samples: &[Sample],
    range: &TargetRange,
    cfg: &AttackConfig,
) -> CampaignOutcome {
    let mut outcomes: Vec<(String, Result<AttackResult, Error>)> = samples
        .par_iter()
        .map(|s| (s.id.clone(), attack(net, &s.image, range, cfg)))
        .collect();
    outcomes.sort_by(|a, b| a.0.cmp(&b.0));

    let mut records = Vec::new();
    let mut results = Vec::new();
    let mut errors = Vec::new();
    for (id, outcome) in outcomes {
        match outcome {
            Ok(res) => {
                records.push(AttackRecord::from_result(&id, &res, range));
                results.push(res);
            }
            Err(e) => errors.push((id, e)),
        }
    }
    CampaignOutcome {
        records,
        results,
        errors,
    }
}
