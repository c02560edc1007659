//! Requests that miss their reserved slot.

use crate::domain::Ms;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LateDecision {
    /// Run in residual slack starting at this absolute time.
    ExecuteNow(Ms),
    /// Wait for the task's next own slot.
    Postpone,
}

/// Decides a late request arriving at `now`. `slots` are the Aggregator's
/// reserved `(start, len)` pairs within one cycle; `extras` are absolute
/// `(start, end)` intervals already granted to other late requests. The
/// request runs in the earliest gap of at least `exec_ms` left in the
/// current cycle once every remaining reservation is honoured.
pub fn handle_late_request(cycle_ms: Ms, slots: &[(Ms, Ms)], extras: &[(Ms, Ms)], now: Ms, exec_ms: Ms) -> LateDecision {
    if cycle_ms == 0 {
        return LateDecision::ExecuteNow(now);
    }
    let base = now / cycle_ms * cycle_ms;
    let end = base + cycle_ms;
    let mut busy: Vec<(Ms, Ms)> = slots
        .iter()
        .map(|&(s, l)| (base + s, base + s + l))
        .chain(extras.iter().copied())
        .filter(|&(s, e)| e > now && s < end)
        .collect();
    busy.sort_unstable();
    let mut at = now;
    for (s, e) in busy {
        if s >= at + exec_ms {
            break;
        }
        at = at.max(e);
    }
    if at + exec_ms <= end {
        LateDecision::ExecuteNow(at)
    } else {
        LateDecision::Postpone
    }
}

/// Earliest start at or after `now` where `exec_ms` fits between the reserved
/// slots and extras, searching forward cycle by cycle.
pub(crate) fn first_gap(cycle_ms: Ms, slots: &[(Ms, Ms)], extras: &[(Ms, Ms)], now: Ms, exec_ms: Ms) -> Ms {
    if cycle_ms == 0 {
        return now;
    }
    let mut t = now;
    for _ in 0..64 {
        if let LateDecision::ExecuteNow(s) = handle_late_request(cycle_ms, slots, extras, t, exec_ms) {
            return s;
        }
        t = (t / cycle_ms + 1) * cycle_ms;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slack_runs_now() {
        // 40% of a 1000 ms cycle is free at the end.
        let slots = [(0, 600)];
        assert_eq!(handle_late_request(1000, &slots, &[], 601, 100), LateDecision::ExecuteNow(601));
    }

    #[test]
    fn no_slack_postpones() {
        let slots = [(0, 500), (500, 500)];
        assert_eq!(handle_late_request(1000, &slots, &[], 1200, 10), LateDecision::Postpone);
    }

    #[test]
    fn reservations_are_skipped() {
        let slots = [(300, 200), (600, 100)];
        assert_eq!(handle_late_request(1000, &slots, &[], 250, 100), LateDecision::ExecuteNow(500));
        assert_eq!(handle_late_request(1000, &slots, &[(2500, 2550)], 2250, 100), LateDecision::ExecuteNow(2700));
        assert_eq!(handle_late_request(1000, &slots, &[], 950, 100), LateDecision::Postpone);
        assert_eq!(first_gap(1000, &slots, &[], 950, 100), 1000);
    }
}
