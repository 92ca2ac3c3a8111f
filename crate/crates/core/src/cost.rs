//! Closed-form per-rank communication volumes and occupancy bounds.
//!
//! Volumes are in matrix elements per process. `S_A = O_A·M·K`,
//! `S_B = O_B·K·N`, `S_C = O_C·M·N`.

use std::fmt;
use std::str::FromStr;

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MultiplySpec {
    pub m: f64,
    pub n: f64,
    pub k: f64,
    pub o_a: f64,
    pub o_b: f64,
    pub o_c: f64,
    pub p: f64,
}

impl MultiplySpec {
    pub fn new(m: usize, n: usize, k: usize, o_a: f64, o_b: f64, o_c: f64, p: usize) -> Self {
        Self { m: m as f64, n: n as f64, k: k as f64, o_a, o_b, o_c, p: p as f64 }
    }

    /// Spec whose occupancies reproduce measured stored-element counts.
    pub fn from_sizes(m: usize, n: usize, k: usize, s_a: usize, s_b: usize, s_c: usize, p: usize) -> Self {
        let occ = |s: usize, r: usize, c: usize| {
            if r * c == 0 {
                0.0
            } else {
                s as f64 / (r as f64 * c as f64)
            }
        };
        Self::new(m, n, k, occ(s_a, m, k), occ(s_b, k, n), occ(s_c, m, n), p)
    }

    pub fn s_a(&self) -> f64 {
        self.o_a * self.m * self.k
    }

    pub fn s_b(&self) -> f64 {
        self.o_b * self.k * self.n
    }

    pub fn s_c(&self) -> f64 {
        self.o_c * self.m * self.n
    }

    /// `S_C / (S_A + S_B)`.
    pub fn r(&self) -> f64 {
        self.s_c() / (self.s_a() + self.s_b())
    }
}

/// Cannon: `K·(O_A·M + O_B·N)/√P`.
pub fn cannon_volume(s: &MultiplySpec) -> f64 {
    s.k * (s.o_a * s.m + s.o_b * s.n) / s.p.sqrt()
}

/// Reduction algorithm: `(S_A + S_B)/P + S_C`.
pub fn case1_volume(s: &MultiplySpec) -> f64 {
    (s.s_a() + s.s_b()) / s.p + s.s_c()
}

/// Virtual-grid algorithm: `(S_A + S_B + S_C)/P + S_B`.
pub fn case2_volume(s: &MultiplySpec) -> f64 {
    (s.s_a() + s.s_b() + s.s_c()) / s.p + s.s_b()
}

/// Largest `O_C` for which the reduction algorithm moves less than Cannon,
/// `(T_w − (S_A+S_B)/P)/(M·N)`, unclamped. `s.o_c` is ignored.
pub fn occupancy_limit_case1_raw(s: &MultiplySpec) -> f64 {
    (cannon_volume(s) - (s.s_a() + s.s_b()) / s.p) / (s.m * s.n)
}

/// [`occupancy_limit_case1_raw`] clamped to `[0, 1]`: 0 means the reduction
/// algorithm never wins, 1 means it always does.
pub fn occupancy_limit_case1(s: &MultiplySpec) -> f64 {
    occupancy_limit_case1_raw(s).clamp(0.0, 1.0)
}

/// `O_C/O` bound with redistribution omitted and `O_A = O_B`: `K(M+N)/(M·N·√P)`.
pub fn occupancy_ratio_bound(m: f64, n: f64, k: f64, p: f64) -> f64 {
    k * (m + n) / (m * n * p.sqrt())
}

/// Approximate result occupancy at block granularity: a result block stays
/// empty only if all `n_blocks_k` products miss, `1 − (1 − O_A·O_B)^n_k`.
/// An estimate for algorithm selection, never used on correctness paths.
pub fn estimate_result_occupancy(s: &MultiplySpec, n_blocks_k: usize) -> f64 {
    let hit = (s.o_a * s.o_b).clamp(0.0, 1.0);
    (1.0 - (1.0 - hit).powi(n_blocks_k as i32)).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Algorithm {
    Cannon,
    /// Reduction of partial products over a linear grid split along `K`.
    Case1,
    /// Virtual column grid; only `B` circulates.
    Case2,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Cannon, Algorithm::Case1, Algorithm::Case2];

    pub fn predicted_volume(self, s: &MultiplySpec) -> f64 {
        match self {
            Algorithm::Cannon => cannon_volume(s),
            Algorithm::Case1 => case1_volume(s),
            Algorithm::Case2 => case2_volume(s),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Cannon => "cannon",
            Algorithm::Case1 => "case1",
            Algorithm::Case2 => "case2",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "cannon" => Ok(Algorithm::Cannon),
            "case1" => Ok(Algorithm::Case1),
            "case2" => Ok(Algorithm::Case2),
            other => Err(Error::InvalidArgument(format!("unknown algorithm '{other}'"))),
        }
    }
}

/// Argmin of the three predicted volumes; ties go to cannon, then case1.
pub fn select_algorithm(m: usize, n: usize, k: usize, o_a: f64, o_b: f64, o_c: f64, p: usize) -> Algorithm {
    select_among(&MultiplySpec::new(m, n, k, o_a, o_b, o_c, p), &Algorithm::ALL)
}

/// Argmin over `candidates`, earlier candidates winning ties.
pub fn select_among(spec: &MultiplySpec, candidates: &[Algorithm]) -> Algorithm {
    let mut best = candidates[0];
    let mut best_v = best.predicted_volume(spec);
    for &a in &candidates[1..] {
        let v = a.predicted_volume(spec);
        if v < best_v {
            best = a;
            best_v = v;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn cannon_examples() {
        assert_eq!(cannon_volume(&MultiplySpec::new(10, 10, 10, 1.0, 1.0, 0.0, 1)), 200.0);
        let s = MultiplySpec::new(1000, 1000, 1_000_000, 0.5, 0.5, 0.5, 100);
        assert_eq!(cannon_volume(&s), 1e8);
        assert_eq!(cannon_volume(&MultiplySpec::new(16, 16, 16, 1.0, 1.0, 1.0, 4)), 256.0);
    }

    #[test]
    fn rectangular_formulas() {
        let s = MultiplySpec::new(8, 8, 64, 1.0, 1.0, 1.0, 4);
        assert_eq!(case1_volume(&s), (512.0 + 512.0) / 4.0 + 64.0);
        assert_eq!(case2_volume(&s), (512.0 + 512.0 + 64.0) / 4.0 + 512.0);
    }

    #[test]
    fn limit_examples() {
        // M=N=K=100 dense, P=4: T_w = 100·200/2 = 10^4, (S_A+S_B)/P = 5·10^3
        let s = MultiplySpec::new(100, 100, 100, 1.0, 1.0, 0.0, 4);
        assert_eq!(occupancy_limit_case1_raw(&s), 0.5);
        assert_eq!(occupancy_limit_case1(&s), 0.5);
        // M=N=10, K=1000: (10^4 − 5·10^3)/10^2 = 50, capped at 1
        let s = MultiplySpec::new(10, 10, 1000, 1.0, 1.0, 0.0, 4);
        assert_eq!(occupancy_limit_case1_raw(&s), 50.0);
        assert_eq!(occupancy_limit_case1(&s), 1.0);
        // growing P shrinks the limit
        let mut prev = f64::INFINITY;
        for p in [4, 16, 64, 256, 1024] {
            let l = occupancy_limit_case1_raw(&MultiplySpec::new(100, 100, 1000, 0.1, 0.1, 0.0, p));
            assert!(l < prev);
            prev = l;
        }
        // redistribution dominates Cannon when P = 1: never beneficial
        assert_eq!(occupancy_limit_case1(&MultiplySpec::new(10, 10, 10, 1.0, 1.0, 0.0, 1)), 0.0);
    }

    #[test]
    fn ratio_bound_examples() {
        assert_eq!(occupancy_ratio_bound(1e3, 1e3, 1e6, 100.0), 200.0);
        for q in [2.0f64, 3.0, 5.0] {
            let d = q * q;
            // K(M+N)/(MN√P) = 2d²/(d²·d)
            assert!((occupancy_ratio_bound(d, d, d, d * d) - 2.0 / d).abs() < 1e-15);
        }
    }

    #[test]
    fn ratio_bound_is_limit_without_redistribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let (m, n, k) = (rng.random_range(1..500), rng.random_range(1..500), rng.random_range(1..5000));
            let o = rng.random_range(0.01..1.0);
            let p = rng.random_range(1..400);
            let s = MultiplySpec::new(m, n, k, o, o, 0.0, p);
            let without_redistribution = cannon_volume(&s) / (s.m * s.n) / o;
            assert!(rel(occupancy_ratio_bound(s.m, s.n, s.k, s.p), without_redistribution) < 1e-12);
        }
    }

    #[test]
    fn estimator_examples() {
        let s = MultiplySpec::new(10, 10, 10, 1.0, 1.0, 0.0, 1);
        assert_eq!(estimate_result_occupancy(&s, 1), 1.0);
        assert_eq!(estimate_result_occupancy(&s, 7), 1.0);
        let s = MultiplySpec::new(10, 10, 10, 0.0, 0.7, 0.0, 1);
        assert_eq!(estimate_result_occupancy(&s, 5), 0.0);
    }

    #[test]
    fn estimator_matches_symbolic_monte_carlo() {
        // Monte-Carlo symbolic product of random 10x10 block patterns at 30%
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let nb = 10;
        let trials = 200;
        let mut filled = 0usize;
        for _ in 0..trials {
            let a: Vec<bool> = (0..nb * nb).map(|_| rng.random::<f64>() < 0.3).collect();
            let b: Vec<bool> = (0..nb * nb).map(|_| rng.random::<f64>() < 0.3).collect();
            for i in 0..nb {
                for j in 0..nb {
                    if (0..nb).any(|k| a[i * nb + k] && b[k * nb + j]) {
                        filled += 1;
                    }
                }
            }
        }
        let empirical = filled as f64 / (trials * nb * nb) as f64;
        let est = estimate_result_occupancy(&MultiplySpec::new(10, 10, 10, 0.3, 0.3, 0.0, 1), nb);
        assert!(rel(est, empirical) < 0.10, "estimate {est} vs empirical {empirical}");
    }

    #[test]
    fn selector_examples() {
        assert_eq!(select_algorithm(1000, 1000, 1_000_000, 0.5, 0.5, 0.5, 100), Algorithm::Case1);
        // square dense on 4 ranks: cannon 16·32/2 = 256, case1 512/4 + 256, case2 768/4 + 256
        let sq = MultiplySpec::new(16, 16, 16, 1.0, 1.0, 1.0, 4);
        assert_eq!(cannon_volume(&sq), 256.0);
        assert_eq!(case1_volume(&sq), 384.0);
        assert_eq!(case2_volume(&sq), 448.0);
        assert_eq!(select_algorithm(16, 16, 16, 1.0, 1.0, 1.0, 4), Algorithm::Cannon);
        // P = 1: cannon is S_A + S_B, the others add S_C on top, so cannon wins or ties
        assert_eq!(select_algorithm(30, 20, 40, 0.4, 0.2, 0.0, 1), Algorithm::Cannon);
        assert_eq!(select_algorithm(64, 64, 64, 1.0, 1.0, 1.0, 64), Algorithm::Cannon);
        assert_eq!(select_algorithm(30, 20, 40, 0.4, 0.2, 0.9, 1), Algorithm::Cannon);
        assert_eq!(select_algorithm(1000, 10, 10, 0.5, 0.5, 0.5, 16), Algorithm::Case2);
    }

    fn spec_strategy() -> impl Strategy<Value = MultiplySpec> {
        (1usize..2000, 1usize..2000, 1usize..20000, 0.001f64..1.0, 0.001f64..1.0, 0.0f64..1.0, 1usize..1000)
            .prop_map(|(m, n, k, a, b, c, p)| MultiplySpec::new(m, n, k, a, b, c, p))
    }

    proptest! {
        #[test]
        fn crossover_matches_limit(s in spec_strategy()) {
            let limit = occupancy_limit_case1_raw(&s);
            // keep away from the exact boundary where rounding decides
            prop_assume!((s.o_c - limit).abs() > 1e-9);
            prop_assert_eq!(case1_volume(&s) < cannon_volume(&s), s.o_c < limit);
        }

        #[test]
        fn ratio_law(s in spec_strategy()) {
            prop_assume!(s.o_c > 0.0);
            let ratio = cannon_volume(&s) / case1_volume(&s);
            let law = s.p.sqrt() / (1.0 + s.r() * s.p);
            prop_assert!(rel(ratio, law) < 1e-12);
        }

        #[test]
        fn volumes_monotone(s in spec_strategy(), bump in 0.0f64..0.5) {
            for f in [cannon_volume, case1_volume, case2_volume] {
                let base = f(&s);
                prop_assert!(base >= 0.0);
                let mut t = s; t.o_a = (s.o_a + bump).min(1.0); prop_assert!(f(&t) >= base);
                let mut t = s; t.o_b = (s.o_b + bump).min(1.0); prop_assert!(f(&t) >= base);
                let mut t = s; t.o_c = (s.o_c + bump).min(1.0); prop_assert!(f(&t) >= base);
                let mut t = s; t.m += 1.0; prop_assert!(f(&t) >= base);
                let mut t = s; t.n += 1.0; prop_assert!(f(&t) >= base);
                let mut t = s; t.k += 1.0; prop_assert!(f(&t) >= base);
            }
            let mut t = s; t.o_c = (s.o_c + bump).min(1.0);
            prop_assert_eq!(cannon_volume(&t), cannon_volume(&s));
            if bump > 0.0 && s.o_c + bump <= 1.0 {
                prop_assert!(case1_volume(&t) > case1_volume(&s));
            }
        }

        #[test]
        fn scaling_in_p(s in spec_strategy()) {
            let mut t = s; t.p = s.p * 4.0;
            prop_assert!(rel(cannon_volume(&t), cannon_volume(&s) / 2.0) < 1e-12);
            let redistribution = |x: &MultiplySpec| case1_volume(x) - x.s_c();
            prop_assert!(rel(redistribution(&t), redistribution(&s) / 4.0) < 1e-9);
        }

        #[test]
        fn selector_is_argmin(s in spec_strategy()) {
            let pick = select_algorithm(s.m as usize, s.n as usize, s.k as usize, s.o_a, s.o_b, s.o_c, s.p as usize);
            let v = pick.predicted_volume(&s);
            for a in Algorithm::ALL {
                prop_assert!(v <= a.predicted_volume(&s));
            }
        }
    }
}
