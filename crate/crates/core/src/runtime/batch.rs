use std::collections::VecDeque;

use serde::Serialize;

use super::QueryId;
use crate::clock::Micros;
use crate::executor::InstanceId;

/// A batch as executed: members in dispatch order with their stage ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Batch {
    pub instance: InstanceId,
    pub model: String,
    pub members: Vec<(QueryId, String)>,
    pub formed_ts: Micros,
}

/// Opportunistic batch formation: takes the oldest queued entries, never
/// waiting for more. The cap is the smallest `max_batch` among the entries
/// taken so far, so a mixed queue never exceeds any member's limit.
pub fn form_batch<T>(queue: &mut VecDeque<T>, max_batch_of: impl Fn(&T) -> usize) -> Option<Vec<T>> {
    let mut cap = usize::MAX;
    let mut out = Vec::new();
    while let Some(head) = queue.front() {
        let next_cap = cap.min(max_batch_of(head).max(1));
        if out.len() >= next_cap {
            break;
        }
        cap = next_cap;
        out.push(queue.pop_front().expect("front exists"));
    }
    (!out.is_empty()).then_some(out)
}
