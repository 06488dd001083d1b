use crate::types::InstanceId;
use std::collections::BTreeMap;

/// Request key inside one run (position in the trace).
pub type Rix = usize;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Entry {
    pub used: u64,
    pub reserved: u64,
}

/// Per-instance KV slots held by each request, materialized and reserved.
#[derive(Debug, Clone, Default)]
pub struct KvLedger {
    by_inst: BTreeMap<InstanceId, BTreeMap<Rix, Entry>>,
    used: BTreeMap<InstanceId, u64>,
    reserved: BTreeMap<InstanceId, u64>,
}

impl KvLedger {
    pub fn used(&self, i: InstanceId) -> u64 {
        self.used.get(&i).copied().unwrap_or(0)
    }

    pub fn reserved(&self, i: InstanceId) -> u64 {
        self.reserved.get(&i).copied().unwrap_or(0)
    }

    pub fn entries(&self, i: InstanceId) -> impl Iterator<Item = (Rix, Entry)> + '_ {
        self.by_inst.get(&i).into_iter().flat_map(|m| m.iter().map(|(&r, &e)| (r, e)))
    }

    pub fn holds(&self, i: InstanceId, r: Rix) -> bool {
        self.by_inst.get(&i).is_some_and(|m| m.contains_key(&r))
    }

    fn adjust(&mut self, i: InstanceId, r: Rix, du: i64, dr: i64) {
        let e = self.by_inst.entry(i).or_default().entry(r).or_default();
        e.used = (e.used as i64 + du) as u64;
        e.reserved = (e.reserved as i64 + dr) as u64;
        let empty = e.used == 0 && e.reserved == 0;
        *self.used.entry(i).or_default() = (self.used(i) as i64 + du) as u64;
        *self.reserved.entry(i).or_default() = (self.reserved(i) as i64 + dr) as u64;
        if empty {
            let m = self.by_inst.get_mut(&i).expect("just inserted");
            m.remove(&r);
            if m.is_empty() {
                self.by_inst.remove(&i);
            }
        }
    }

    pub fn reserve(&mut self, i: InstanceId, r: Rix, tokens: u64) {
        if tokens > 0 {
            self.adjust(i, r, 0, tokens as i64);
        }
    }

    /// Turns up to `tokens` of `r`'s reservations into materialized KV,
    /// lowest instance id first. Returns the number converted.
    pub fn materialize(&mut self, r: Rix, mut tokens: u64) -> u64 {
        let holders: Vec<(InstanceId, u64)> =
            self.by_inst.iter().filter_map(|(&i, m)| m.get(&r).filter(|e| e.reserved > 0).map(|e| (i, e.reserved))).collect();
        let mut done = 0;
        for (i, res) in holders {
            let take = res.min(tokens);
            if take == 0 {
                break;
            }
            self.adjust(i, r, take as i64, -(take as i64));
            tokens -= take;
            done += take;
        }
        done
    }

    /// Drops every slot `r` holds. Returns (used, reserved) released.
    pub fn release(&mut self, r: Rix) -> (u64, u64) {
        let holders: Vec<(InstanceId, Entry)> =
            self.by_inst.iter().filter_map(|(&i, m)| m.get(&r).map(|&e| (i, e))).collect();
        let mut total = (0, 0);
        for (i, e) in holders {
            self.adjust(i, r, -(e.used as i64), -(e.reserved as i64));
            total.0 += e.used;
            total.1 += e.reserved;
        }
        total
    }

    /// Moves everything on `src` to `dsts`, most free slots first, splitting
    /// entries as needed. `free` gives each destination's unused slots.
    /// Returns the materialized tokens moved per request, or `None` (and
    /// changes nothing) if the destinations cannot absorb it.
    pub fn evacuate(&mut self, src: InstanceId, dsts: &[(InstanceId, u64)]) -> Option<BTreeMap<Rix, u64>> {
        let need = self.used(src) + self.reserved(src);
        let room: u64 = dsts.iter().map(|d| d.1).sum();
        if need > room {
            return None;
        }
        let mut order: Vec<(InstanceId, u64)> = dsts.to_vec();
        order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let entries: Vec<(Rix, Entry)> = self.entries(src).collect();
        let mut moved = BTreeMap::new();
        let mut slot = 0;
        for (r, e) in entries {
            self.adjust(src, r, -(e.used as i64), -(e.reserved as i64));
            if e.used > 0 {
                moved.insert(r, e.used);
            }
            for (mut left, is_used) in [(e.used, true), (e.reserved, false)] {
                while left > 0 {
                    let (d, free) = &mut order[slot];
                    let take = left.min(*free);
                    if take == 0 {
                        slot += 1;
                        continue;
                    }
                    if is_used {
                        self.adjust(*d, r, take as i64, 0);
                    } else {
                        self.adjust(*d, r, 0, take as i64);
                    }
                    *free -= take;
                    left -= take;
                }
            }
        }
        Some(moved)
    }

    /// Materialized KV of `r` across all instances.
    pub fn request_used(&self, r: Rix) -> u64 {
        self.by_inst.values().filter_map(|m| m.get(&r)).map(|e| e.used).sum()
    }

    pub fn request_reserved(&self, r: Rix) -> u64 {
        self.by_inst.values().filter_map(|m| m.get(&r)).map(|e| e.reserved).sum()
    }

    pub fn total_used(&self) -> u64 {
        self.used.values().sum()
    }

    /// Cached per-instance totals agree with the entries.
    pub fn check(&self) -> Result<(), String> {
        for (&i, m) in &self.by_inst {
            let u: u64 = m.values().map(|e| e.used).sum();
            let r: u64 = m.values().map(|e| e.reserved).sum();
            if u != self.used(i) || r != self.reserved(i) {
                return Err(format!("instance {i}: ledger totals drifted"));
            }
        }
        for (&i, &u) in &self.used {
            if u > 0 && !self.by_inst.contains_key(&i) {
                return Err(format!("instance {i}: used without entries"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserve_materialize_release() {
        let mut l = KvLedger::default();
        l.reserve(0, 7, 100);
        l.reserve(1, 7, 50);
        assert_eq!(l.materialize(7, 120), 120);
        assert_eq!((l.used(0), l.reserved(0), l.used(1), l.reserved(1)), (100, 0, 20, 30));
        assert_eq!(l.request_used(7), 120);
        assert_eq!(l.release(7), (120, 30));
        assert_eq!(l.total_used(), 0);
        l.check().unwrap();
    }

    #[test]
    fn evacuation_conserves_and_splits() {
        let mut l = KvLedger::default();
        l.reserve(0, 1, 40_000);
        l.materialize(1, 40_000);
        l.reserve(0, 2, 500);
        let moved = l.evacuate(0, &[(1, 30_000), (2, 20_000)]).unwrap();
        assert_eq!(moved, BTreeMap::from([(1, 40_000)]));
        assert_eq!(l.used(0) + l.reserved(0), 0);
        assert_eq!(l.request_used(1), 40_000);
        assert_eq!(l.request_reserved(2), 500);
        assert_eq!(l.used(1) + l.reserved(1) + l.used(2) + l.reserved(2), 40_500);
        l.check().unwrap();
    }

    #[test]
    fn evacuation_refuses_when_full() {
        let mut l = KvLedger::default();
        l.reserve(0, 1, 100);
        assert!(l.evacuate(0, &[(1, 99)]).is_none());
        assert_eq!(l.reserved(0), 100);
    }
}
