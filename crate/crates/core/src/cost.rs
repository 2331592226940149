//! Analytic attention cost formulas, multiply-accumulate measurement and
//! the padding-waste comparison between packing and max-length padding.
//!
//! One MAC counts as one FLOP unit. Only projections and attention
//! products are counted; softmax, normalisation and pointwise work are
//! free.
//!
//! Accounting of the SPA formula: the `B(NC + NC²)` term is the per-token
//! gate (`NC`) plus one projection applied to every token of the grid
//! (`NC²`, the value projection); `B′(3LC² + 2L²C)` covers the query, key
//! and output projections and both attention products inside containers.
//! The SPA block is laid out so instrumented counts match that split
//! exactly. Projecting all four matrices per container instead gives
//! [`flops_spa_per_container`]; [`spa_accounting_delta`] is the difference.

use std::fmt::Write as _;

use crate::numerics::macs::{self, MacCounts};

/// `B(4NC² + 2N²C)`
pub fn flops_msa(b: u64, n: u64, c: u64) -> u64 {
    b * (4 * n * c * c + 2 * n * n * c)
}

/// `B(4NC² + 2M²NC)`
pub fn flops_wmsa(b: u64, n: u64, c: u64, m: u64) -> u64 {
    b * (4 * n * c * c + 2 * m * m * n * c)
}

/// `B(NC + NC²) + B′(3LC² + 2L²C)`
pub fn flops_spa(b: u64, n: u64, c: u64, l: u64, b_prime: u64) -> u64 {
    b * (n * c + n * c * c) + b_prime * (3 * l * c * c + 2 * l * l * c)
}

/// SPA cost when the gate runs per token and all four projections run per
/// container: `BNC + B′(4LC² + 2L²C)`.
pub fn flops_spa_per_container(b: u64, n: u64, c: u64, l: u64, b_prime: u64) -> u64 {
    b * n * c + b_prime * (4 * l * c * c + 2 * l * l * c)
}

/// `flops_spa − flops_spa_per_container = BNC² − B′LC²`, signed.
pub fn spa_accounting_delta(b: u64, n: u64, c: u64, l: u64, b_prime: u64) -> i128 {
    flops_spa(b, n, c, l, b_prime) as i128 - flops_spa_per_container(b, n, c, l, b_prime) as i128
}

/// Containers needed for a select ratio: `ceil(ratio · B · N / L)`.
pub fn containers_for_ratio(ratio: f64, b: u64, n: u64, l: u64) -> u64 {
    selected_for_ratio(ratio, b, n).div_ceil(l.max(1))
}

/// `ceil(ratio · B · N)`, clamped to `[0, B·N]`.
pub fn selected_for_ratio(ratio: f64, b: u64, n: u64) -> u64 {
    let total = b * n;
    let want = (ratio.clamp(0.0, 1.0) * total as f64 - 1e-9).ceil().max(0.0) as u64;
    want.min(total)
}

/// Wasted slots `(spa, maxpad)`: packing pads only the last container,
/// max-length padding pads every image up to the largest count.
pub fn padding_waste(selected_counts: &[usize], len: usize) -> (usize, usize) {
    let total: usize = selected_counts.iter().sum();
    let containers = total.div_ceil(len.max(1));
    let spa = containers * len - total;
    let max = selected_counts.iter().copied().max().unwrap_or(0);
    (spa, selected_counts.len() * max - total)
}

/// Runs `f` against a fresh counter and returns its result and the MACs
/// recorded while it ran.
pub fn measure_macs<R>(f: impl FnOnce() -> R) -> (R, MacCounts) {
    macs::measure(f)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub b: u64,
    pub n: u64,
    pub c: u64,
    pub m: u64,
    pub l: u64,
    pub ratio: f64,
    pub b_prime: u64,
    pub omega_msa: u64,
    pub omega_wmsa: u64,
    pub omega_spa: u64,
    /// `omega_spa` minus the per-container accounting.
    pub spa_delta: i128,
    pub measured_macs: Option<u64>,
    pub padding_waste_spa: usize,
    pub padding_waste_maxpad: usize,
}

pub const COST_CSV_HEADER: &str =
    "B,N,C,M,L,ratio,B_prime,omega_msa,omega_wmsa,omega_spa,spa_delta_per_container,measured_macs,waste_spa,waste_maxpad";

impl CostReport {
    /// Analytic report for a select ratio. The selected tokens
    /// `ceil(ratio·B·N)` are spread as evenly as possible over the images
    /// for the waste columns.
    pub fn from_ratio(b: u64, n: u64, c: u64, m: u64, ratio: f64) -> Self {
        let l = m * m;
        let selected = selected_for_ratio(ratio, b, n);
        let b_prime = selected.div_ceil(l.max(1));
        let counts: Vec<usize> = (0..b)
            .map(|i| (selected / b.max(1) + u64::from(i < selected % b.max(1))) as usize)
            .collect();
        let (spa, maxpad) = padding_waste(&counts, l as usize);
        CostReport {
            b,
            n,
            c,
            m,
            l,
            ratio,
            b_prime,
            omega_msa: flops_msa(b, n, c),
            omega_wmsa: flops_wmsa(b, n, c, m),
            omega_spa: flops_spa(b, n, c, l, b_prime),
            spa_delta: spa_accounting_delta(b, n, c, l, b_prime),
            measured_macs: None,
            padding_waste_spa: spa,
            padding_waste_maxpad: maxpad,
        }
    }

    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.b,
            self.n,
            self.c,
            self.m,
            self.l,
            self.ratio,
            self.b_prime,
            self.omega_msa,
            self.omega_wmsa,
            self.omega_spa,
            self.spa_delta,
            self.measured_macs.map(|v| v.to_string()).unwrap_or_default(),
            self.padding_waste_spa,
            self.padding_waste_maxpad
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn formula_examples() {
        assert_eq!(flops_msa(1, 16, 4), 3072);
        assert_eq!(flops_msa(2, 16, 4), 2 * 3072);
        assert_eq!(flops_msa(1, 64, 8), 81920);
        assert_eq!(flops_wmsa(1, 16, 4, 2), 1536);
        assert_eq!(flops_wmsa(1, 64, 8, 4), 32768);
        assert_eq!(flops_wmsa(3, 64, 8, 8), flops_msa(3, 64, 8));
        assert_eq!(flops_spa(2, 64, 8, 16, 2), 23552);
        assert_eq!(flops_spa(2, 64, 8, 16, 0), 2 * (512 + 4096));
    }

    #[test]
    fn quarter_selection_beats_windows() {
        for &(c, n, m) in &[(96u64, 1024u64, 7u64), (96, 3136, 7), (24, 4096, 4), (192, 256, 4)] {
            let l = m * m;
            let bp = containers_for_ratio(0.25, 1, n, l);
            assert!(flops_spa(1, n, c, l, bp) < flops_wmsa(1, n, c, m), "{c} {n} {m}");
        }
    }

    #[test]
    fn waste_examples() {
        assert_eq!(padding_waste(&[3, 5, 2], 4), (2, 5));
        assert_eq!(padding_waste(&[4, 4, 4], 3).1, 0);
        assert_eq!(padding_waste(&[], 4), (0, 0));
    }

    #[test]
    fn maxpad_can_undercut_packing() {
        assert_eq!(padding_waste(&[7], 6), (5, 0));
        assert_eq!(padding_waste(&[23, 20], 6), (5, 3));
    }

    #[test]
    fn report_from_ratio() {
        let r = CostReport::from_ratio(1, 16, 4, 2, 1.0);
        assert_eq!((r.omega_msa, r.omega_wmsa, r.b_prime), (3072, 1536, 4));
        let z = CostReport::from_ratio(2, 16, 4, 2, 0.0);
        assert_eq!(z.omega_spa, 2 * (16 * 4 + 16 * 16));
        assert_eq!(z.csv_row().split(',').count(), COST_CSV_HEADER.split(',').count());
    }

    #[test]
    fn ratio_rounding_is_exact_on_round_values() {
        assert_eq!(selected_for_ratio(0.25, 2, 64), 32);
        assert_eq!(selected_for_ratio(0.3, 1, 10), 3);
        assert_eq!(selected_for_ratio(1.0, 3, 7), 21);
        assert_eq!(containers_for_ratio(0.05, 1, 100, 16), 1);
    }

    proptest! {
        #[test]
        fn spa_monotone_in_containers(b in 1u64..4, n in 1u64..256, c in 1u64..64, l in 1u64..32, bp in 0u64..64) {
            prop_assert!(flops_spa(b, n, c, l, bp) <= flops_spa(b, n, c, l, bp + 1));
        }

        #[test]
        fn spa_waste_below_len(counts in proptest::collection::vec(0usize..40, 0..8), l in 1usize..16) {
            let (spa, _) = padding_waste(&counts, l);
            prop_assert!(spa < l);
        }
    }
}
