//! Downtime-fraction availability arithmetic.
//!
//! A year is 365 days. Faults are independent and each one costs exactly
//! `recovery_seconds` of downtime.

use serde::Serialize;
use thiserror::Error;

pub const SECONDS_PER_YEAR: f64 = 31_536_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("fault rate must be finite and >= 0, got {0}")]
    FaultRate(f64),
    #[error("recovery time must be finite and >= 0, got {0}")]
    RecoveryTime(f64),
    #[error("recovery time must be > 0 to compute a budget, got {0}")]
    NonPositiveRecovery(f64),
    #[error("availability must lie in [0, 1), got {0}")]
    Target(f64),
    #[error("at least one replica is required")]
    NoReplicas,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AvailabilityModel {
    pub faults_per_year: f64,
    pub recovery_seconds: f64,
    pub target_availability: f64,
}

impl AvailabilityModel {
    pub fn new(faults_per_year: f64, recovery_seconds: f64, target_availability: f64) -> Result<Self, ModelError> {
        if !(faults_per_year.is_finite() && faults_per_year >= 0.0) {
            return Err(ModelError::FaultRate(faults_per_year));
        }
        if !(recovery_seconds.is_finite() && recovery_seconds >= 0.0) {
            return Err(ModelError::RecoveryTime(recovery_seconds));
        }
        check_target(target_availability)?;
        Ok(AvailabilityModel { faults_per_year, recovery_seconds, target_availability })
    }

    pub fn downtime_seconds(&self) -> f64 {
        self.faults_per_year * self.recovery_seconds
    }

    pub fn availability(&self) -> f64 {
        availability(self)
    }

    pub fn meets_target(&self) -> bool {
        self.availability() >= self.target_availability
    }
}

fn check_target(target: f64) -> Result<(), ModelError> {
    if (0.0..1.0).contains(&target) {
        Ok(())
    } else {
        Err(ModelError::Target(target))
    }
}

/// `1 - downtime / year`, floored at 0.
pub fn availability(model: &AvailabilityModel) -> f64 {
    (1.0 - model.downtime_seconds() / SECONDS_PER_YEAR).max(0.0)
}

/// Most recoveries per year that still meet `target_availability`:
/// `floor((1 - target) * year / recovery)`.
///
/// The result is nudged by at most a step or two so that it agrees exactly
/// with [`availability`] under floating point: `budget` faults meet the
/// target and `budget + 1` do not.
pub fn recovery_budget(target_availability: f64, recovery_seconds: f64) -> Result<u64, ModelError> {
    check_target(target_availability)?;
    if !(recovery_seconds.is_finite() && recovery_seconds > 0.0) {
        return Err(ModelError::NonPositiveRecovery(recovery_seconds));
    }
    let raw = ((1.0 - target_availability) * SECONDS_PER_YEAR / recovery_seconds).floor();
    if raw >= u64::MAX as f64 {
        return Ok(u64::MAX);
    }
    // Unfloored, so that a zero target still has a finite budget.
    let meets = |faults: u64| 1.0 - faults as f64 * recovery_seconds / SECONDS_PER_YEAR >= target_availability;
    let mut budget = raw as u64;
    for _ in 0..4 {
        if budget > 0 && !meets(budget) {
            budget -= 1;
        } else if meets(budget + 1) {
            budget += 1;
        } else {
            break;
        }
    }
    Ok(budget)
}

/// Parallel redundancy with independent failures: `1 - (1 - a)^replicas`.
pub fn replica_model(single_node_availability: f64, replicas: u32) -> Result<f64, ModelError> {
    if replicas == 0 {
        return Err(ModelError::NoReplicas);
    }
    if !(0.0..=1.0).contains(&single_node_availability) {
        return Err(ModelError::Target(single_node_availability));
    }
    if replicas == 1 {
        return Ok(single_node_availability);
    }
    Ok(1.0 - (1.0 - single_node_availability).powi(replicas as i32))
}

/// Fewest replicas whose combined availability meets `target`, searching
/// up to `max_replicas`.
pub fn replicas_needed(
    single_node_availability: f64,
    target: f64,
    max_replicas: u32,
) -> Result<Option<u32>, ModelError> {
    check_target(target)?;
    for n in 1..=max_replicas.max(1) {
        if replica_model(single_node_availability, n)? >= target {
            return Ok(Some(n));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_faults_is_full_availability() {
        assert_eq!(AvailabilityModel::new(0.0, 120.0, 0.99999).unwrap().availability(), 1.0);
    }

    #[test]
    fn downtime_beyond_a_year_floors_at_zero() {
        assert_eq!(AvailabilityModel::new(1e6, 1e6, 0.5).unwrap().availability(), 0.0);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(AvailabilityModel::new(-1.0, 1.0, 0.9).is_err());
        assert!(AvailabilityModel::new(1.0, f64::NAN, 0.9).is_err());
        assert!(AvailabilityModel::new(1.0, 1.0, 1.0).is_err());
        assert_eq!(recovery_budget(0.9, 0.0), Err(ModelError::NonPositiveRecovery(0.0)));
        assert_eq!(replica_model(0.9, 0), Err(ModelError::NoReplicas));
    }
}
