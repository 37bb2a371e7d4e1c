use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One direction of the path: drop-tail FIFO at a fixed rate, then a fixed
/// propagation delay, then Bernoulli loss. Times are nanoseconds.
pub(crate) struct Link {
    ns_per_byte: f64,
    prop_ns: u64,
    depth: usize,
    busy_until: u64,
    in_queue: VecDeque<u64>,
    loss: f64,
    rng: ChaCha8Rng,
}

impl Link {
    pub fn new(rate_mbps: f64, delay_ms: f64, loss_pct: f64, depth: usize, seed: u64) -> Self {
        Self {
            ns_per_byte: 8e3 / rate_mbps,
            prop_ns: (delay_ms * 1e6).round() as u64,
            depth,
            busy_until: 0,
            in_queue: VecDeque::new(),
            loss: loss_pct / 100.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Arrival time at the far end, or `None` if the packet is dropped.
    pub fn transmit(&mut self, now: u64, bytes: usize) -> Option<u64> {
        let lost = self.rng.random::<f64>() < self.loss;
        while self.in_queue.front().is_some_and(|&done| done <= now) {
            self.in_queue.pop_front();
        }
        if self.in_queue.len() >= self.depth {
            return None;
        }
        let start = now.max(self.busy_until);
        let done = start + (bytes as f64 * self.ns_per_byte).ceil() as u64;
        self.busy_until = done;
        self.in_queue.push_back(done);
        if lost {
            None
        } else {
            Some(done + self.prop_ns)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serialization_and_propagation() {
        // 80 Mb/s: 100 ns per byte
        let mut l = Link::new(80.0, 10.0, 0.0, 100, 1);
        assert_eq!(l.transmit(0, 1000), Some(100_000 + 10_000_000));
        // queued behind the first frame
        assert_eq!(l.transmit(0, 1000), Some(200_000 + 10_000_000));
    }

    #[test]
    fn drop_tail() {
        let mut l = Link::new(1.0, 1.0, 0.0, 2, 1);
        assert!(l.transmit(0, 1500).is_some());
        assert!(l.transmit(0, 1500).is_some());
        assert!(l.transmit(0, 1500).is_none());
    }

    #[test]
    fn loss_rate_roughly_matches() {
        let mut l = Link::new(1e6, 1.0, 10.0, 1_000_000, 9);
        let lost = (0..20_000)
            .filter(|&i| l.transmit(i * 1_000_000, 100).is_none())
            .count();
        assert!((1700..2300).contains(&lost), "{lost}");
    }
}
