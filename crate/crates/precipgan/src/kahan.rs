//! Neumaier compensated summation.
//!
//! Used wherever a reduction must be insensitive to summand order at the
//! 1e-10 level (ensemble mean/std, weighted metric sums).

#[derive(Debug, Clone, Copy, Default)]
pub struct Accumulator {
    sum: f64,
    compensation: f64,
}

impl Accumulator {
    pub fn new() -> Accumulator {
        Accumulator::default()
    }

    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Compensated sum of an iterator.
pub fn sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut acc = Accumulator::new();
    for v in values {
        acc.add(v);
    }
    acc.total()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_cancellation() {
        // Naive summation loses the 1.0 entirely.
        let values = [1e16, 1.0, -1e16];
        assert_eq!(sum(values.iter().cloned()), 1.0);
    }

    #[test]
    fn order_insensitive() {
        let mut values: Vec<f64> = (0..1000).map(|i| ((i * 2654435761u64 as usize) as f64).sin() * 1e8).collect();
        let a = sum(values.iter().cloned());
        values.reverse();
        let b = sum(values.iter().cloned());
        assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }
}
