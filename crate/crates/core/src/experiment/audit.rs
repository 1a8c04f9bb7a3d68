//! Date-range guard on every set of rows that reaches a fit.

use std::collections::BTreeMap;
use std::sync::Mutex;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::config::YearRange;
use crate::error::{Error, Result};

/// Aggregated checks for one (scope, stage) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    /// season label or `all`
    pub scope: String,
    /// what the rows were used for, e.g. `cv-fold` or `pca`
    pub stage: String,
    pub checks: usize,
    pub dates_checked: usize,
    pub test_dates: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub test_years: YearRange,
    pub entries: Vec<AuditEntry>,
    pub dates_checked: usize,
    pub test_dates: usize,
}

/// Counts test-period dates in every training row set it is shown. Safe to
/// share across threads.
#[derive(Debug)]
pub struct LeakageAudit {
    test_years: YearRange,
    entries: Mutex<BTreeMap<(String, String), AuditEntry>>,
}

impl LeakageAudit {
    pub fn new(test_years: YearRange) -> Self {
        LeakageAudit {
            test_years,
            entries: Mutex::new(BTreeMap::new()),
        }
    }

    /// Records the rows of one fit and fails if any lies in the test years.
    pub fn check(&self, scope: &str, stage: &str, dates: &[NaiveDate]) -> Result<()> {
        let hits: Vec<NaiveDate> = dates.iter().copied().filter(|d| self.test_years.contains(*d)).collect();
        {
            let mut map = self.entries.lock().unwrap_or_else(|e| e.into_inner());
            let e = map
                .entry((scope.to_string(), stage.to_string()))
                .or_insert_with(|| AuditEntry {
                    scope: scope.to_string(),
                    stage: stage.to_string(),
                    checks: 0,
                    dates_checked: 0,
                    test_dates: 0,
                });
            e.checks += 1;
            e.dates_checked += dates.len();
            e.test_dates += hits.len();
        }
        match hits.first() {
            None => Ok(()),
            Some(first) => Err(Error::Leakage(format!(
                "{scope}/{stage}: {} test-period dates, first {first}",
                hits.len()
            ))),
        }
    }

    pub fn report(&self) -> AuditReport {
        let map = self.entries.lock().unwrap_or_else(|e| e.into_inner());
        let entries: Vec<AuditEntry> = map.values().cloned().collect();
        AuditReport {
            test_years: self.test_years,
            dates_checked: entries.iter().map(|e| e.dates_checked).sum(),
            test_dates: entries.iter().map(|e| e.test_dates).sum(),
            entries,
        }
    }
}
