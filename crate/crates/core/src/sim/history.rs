use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::LatentState;

/// One committed (actually computed) output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    pub sigma: f64,
    pub hidden: LatentState,
}

/// Per-group ring of committed hidden states backing extrapolation.
///
/// Records within a group are strictly increasing in step and strictly
/// decreasing in sigma. Estimated states are never committed; only the
/// runner's computed outputs go in here.
#[derive(Debug, Clone)]
pub struct GroupHistory {
    groups: Vec<Vec<HistoryRecord>>,
    capacity: usize,
}

impl GroupHistory {
    pub fn new(num_groups: usize, capacity: usize) -> Result<Self> {
        if num_groups == 0 {
            return Err(Error::config("history needs at least one group"));
        }
        if capacity < 2 {
            return Err(Error::config("history capacity must be at least 2"));
        }
        Ok(Self {
            groups: vec![Vec::with_capacity(capacity); num_groups],
            capacity,
        })
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn commit(
        &mut self,
        group: usize,
        step: usize,
        sigma: f64,
        hidden: LatentState,
    ) -> Result<()> {
        let records = self
            .groups
            .get_mut(group)
            .ok_or_else(|| Error::config(format!("no history slot for group {group}")))?;
        if let Some(last) = records.last() {
            if step <= last.step || sigma >= last.sigma {
                return Err(Error::config(format!(
                    "group {group}: commit (step {step}, sigma {sigma}) does not follow \
                     (step {}, sigma {})",
                    last.step, last.sigma
                )));
            }
            last.hidden.ensure_same_shape(&hidden)?;
        }
        if records.len() == self.capacity {
            records.remove(0);
        }
        records.push(HistoryRecord {
            step,
            sigma,
            hidden,
        });
        Ok(())
    }

    pub fn records(&self, group: usize) -> &[HistoryRecord] {
        &self.groups[group]
    }

    pub fn len(&self, group: usize) -> usize {
        self.groups[group].len()
    }

    pub fn last(&self, group: usize) -> Option<&HistoryRecord> {
        self.groups[group].last()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(v: f64) -> LatentState {
        LatentState::from_vec(vec![v]).unwrap()
    }

    #[test]
    fn enforces_ordering() {
        let mut h = GroupHistory::new(1, 4).unwrap();
        h.commit(0, 0, 1.0, state(1.0)).unwrap();
        assert!(h.commit(0, 0, 0.9, state(1.0)).is_err());
        assert!(h.commit(0, 1, 1.0, state(1.0)).is_err());
        h.commit(0, 1, 0.9, state(2.0)).unwrap();
        assert_eq!(h.len(0), 2);
    }

    #[test]
    fn evicts_oldest_at_capacity() {
        let mut h = GroupHistory::new(2, 3).unwrap();
        for t in 0..5 {
            h.commit(1, t, 1.0 - 0.1 * t as f64, state(t as f64)).unwrap();
        }
        let steps: Vec<_> = h.records(1).iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![2, 3, 4]);
        assert_eq!(h.len(0), 0);
    }

    #[test]
    fn rejects_shape_change() {
        let mut h = GroupHistory::new(1, 3).unwrap();
        h.commit(0, 0, 1.0, state(1.0)).unwrap();
        let wide = LatentState::from_vec(vec![1.0, 2.0]).unwrap();
        assert!(h.commit(0, 1, 0.5, wide).is_err());
    }
}
