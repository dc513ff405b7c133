//! Centralized step over every robot's filter.

use std::collections::BTreeMap;

use super::filter::{
    MeasurementBatch, MeasurementEntry, MeasurementNoise, RobotFilter, UpdateOutcome,
};
use crate::error::{Error, Result};
use crate::geometry::{Observation, Pose2D};
use crate::kinematics::ControlInput;

/// Predicts every filter, then updates each robot that has sightings.
///
/// All updates read landmark poses from one snapshot of the post-predict
/// means, so the result does not depend on the order robots are processed.
/// `observations[i]` are robot `i`'s sightings (empty: predict only);
/// a `None` control skips the predict for that robot.
pub fn swarm_step(
    filters: &mut [RobotFilter],
    controls: &[Option<ControlInput>],
    observations: &[Vec<Observation>],
    noise: &MeasurementNoise,
) -> Result<Vec<Option<UpdateOutcome>>> {
    let order: Vec<usize> = (0..filters.len()).collect();
    swarm_step_ordered(filters, controls, observations, noise, &order)
}

/// [`swarm_step`] visiting robots in `order` (a permutation of `0..N`).
pub fn swarm_step_ordered(
    filters: &mut [RobotFilter],
    controls: &[Option<ControlInput>],
    observations: &[Vec<Observation>],
    noise: &MeasurementNoise,
    order: &[usize],
) -> Result<Vec<Option<UpdateOutcome>>> {
    let n = filters.len();
    if controls.len() != n || observations.len() != n {
        return Err(Error::invalid(format!(
            "{n} filters but {} controls and {} observation lists",
            controls.len(),
            observations.len()
        )));
    }
    let mut seen = vec![false; n];
    for &i in order {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(Error::invalid("processing order is not a permutation"));
        }
    }
    if order.len() != n {
        return Err(Error::invalid("processing order is not a permutation"));
    }
    for (i, f) in filters.iter().enumerate() {
        if f.robot_id != i {
            return Err(Error::invalid(format!(
                "filter at index {i} tracks robot {}",
                f.robot_id
            )));
        }
    }

    for &i in order {
        if let Some(c) = &controls[i] {
            filters[i].predict(c)?;
        }
    }

    let snapshot: Vec<Pose2D> = filters.iter().map(RobotFilter::pose).collect();
    let mut outcomes = vec![None; n];
    for &i in order {
        let obs = &observations[i];
        if obs.is_empty() {
            continue;
        }
        let mut entries = Vec::with_capacity(obs.len());
        let mut landmark_poses = BTreeMap::new();
        for o in obs {
            if o.observer != i {
                return Err(Error::invalid(format!(
                    "observation by robot {} listed under robot {i}",
                    o.observer
                )));
            }
            let target = snapshot.get(o.target).ok_or_else(|| {
                Error::invalid(format!("observation targets unknown robot {}", o.target))
            })?;
            entries.push(MeasurementEntry {
                target: o.target,
                range: o.range,
                bearing: o.bearing,
            });
            landmark_poses.insert(o.target, *target);
        }
        let batch = MeasurementBatch {
            observer: i,
            entries,
            landmark_poses,
        };
        outcomes[i] = Some(filters[i].update(&batch, noise)?);
    }
    Ok(outcomes)
}
