//! Center-vector regularization.
//!
//! The center vector `s` is the mean of the row-normalized batch features.
//! Its norm is 1 when every feature points the same way and shrinks as the
//! batch spreads out, so it serves both as an auxiliary loss target and as a
//! per-batch learning-rate multiplier and update gate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Tape, Var};

/// Tolerance on `s_mag` leaving `[0, 1]` before it is a contract error.
pub const MAG_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateReference {
    /// Compare with the magnitude of the previous batch, accepted or not.
    Previous,
    /// Compare with the magnitude of the last batch that was trained on.
    LastAccepted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvrConfig {
    pub s_phi: f64,
    pub eta0: f64,
    pub lambda_cv: f64,
    pub gate_reference: GateReference,
}

impl Default for CvrConfig {
    fn default() -> Self {
        Self { s_phi: 0.5, eta0: 0.03, lambda_cv: 1.0, gate_reference: GateReference::Previous }
    }
}

impl CvrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.s_phi) {
            return Err(Error::Validation(format!("s_phi must be in [0, 1], got {}", self.s_phi)));
        }
        if !(self.eta0 >= 0.0) || !(self.lambda_cv >= 0.0) {
            return Err(Error::Validation("eta0 and lambda_cv must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvrState {
    pub config: CvrConfig,
    pub prev_mag: f64,
    pub steps_total: u64,
    pub steps_updated: u64,
    pub steps_skipped: u64,
}

impl CvrState {
    pub fn new(config: CvrConfig) -> Self {
        Self { config, prev_mag: 1.0, steps_total: 0, steps_updated: 0, steps_skipped: 0 }
    }

    /// `eta0 · (1 − s_mag)`.
    pub fn regulated_lr(&self, s_mag: f64) -> Result<f64> {
        Ok(self.config.eta0 * (1.0 - check_mag(s_mag)?))
    }

    /// Whether to train on a batch of magnitude `s_mag`: only when the batch
    /// is more spread out than the reference batch. Advances the counters.
    pub fn gate(&mut self, s_mag: f64) -> bool {
        let update = s_mag < self.prev_mag;
        if update || self.config.gate_reference == GateReference::Previous {
            self.prev_mag = s_mag.clamp(0.0, 1.0);
        }
        self.steps_total += 1;
        if update {
            self.steps_updated += 1;
        } else {
            self.steps_skipped += 1;
        }
        update
    }

    pub fn skip_rate(&self) -> f64 {
        if self.steps_total == 0 {
            0.0
        } else {
            self.steps_skipped as f64 / self.steps_total as f64
        }
    }
}

fn check_mag(s_mag: f64) -> Result<f64> {
    if !(-MAG_TOL..=1.0 + MAG_TOL).contains(&s_mag) {
        return Err(Error::Contract(format!("center-vector magnitude {s_mag} outside [0, 1]")));
    }
    Ok(s_mag.clamp(0.0, 1.0))
}

/// `(1/B) Σ_i f_i / ‖f_i‖` over the rows of `feats` (`[B, d]` -> `[d]`).
pub fn center_vector(tape: &mut Tape<'_>, feats: Var) -> Result<Var> {
    let shape = tape.shape(feats);
    if shape.len() != 2 {
        return Err(Error::Shape(format!("center_vector expects [B, d] features, got {shape:?}")));
    }
    let d = shape[1];
    if let Some(row) = tape.value(feats).chunks_exact(d).position(|r| r.iter().all(|&v| v == 0.0)) {
        return Err(Error::Numeric(format!("feature row {row} has zero norm")));
    }
    let unit = tape.normalize_rows(feats);
    tape.mean_axis(unit, 0)
}

/// `| ‖s‖ − s_phi |`.
pub fn cv_loss(tape: &mut Tape<'_>, s: Var, s_phi: f64) -> Var {
    let n = tape.l2_norm(s);
    let d = tape.add_scalar(n, -s_phi);
    tape.abs(d)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    use super::*;
    use crate::nn::init::rng_stream;
    use crate::numcore::Tensor;

    fn center_of(feats: Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::no_grad();
        let f = tape.constant(feats);
        let s = center_vector(&mut tape, f)?;
        Ok(tape.value(s).to_vec())
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn identical_rows_collapse_to_unit_center() {
        let u = [0.6, 0.0, 0.8];
        let s = center_of(Tensor::from_rows(&[u.to_vec(), u.to_vec(), u.to_vec()]).unwrap()).unwrap();
        assert!(s.iter().zip(u).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!((norm(&s) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn antipodal_rows_cancel() {
        let s = center_of(Tensor::from_rows(&[vec![1.0, -2.0], vec![-1.0, 2.0]]).unwrap()).unwrap();
        assert_eq!(norm(&s), 0.0);
    }

    #[test]
    fn zero_row_is_named() {
        let err = center_of(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("row 1")), "{err}");
    }

    #[test]
    fn random_sphere_batch_magnitude() {
        // E‖s‖² = 1/B for i.i.d. uniform unit rows
        let (b, d, trials) = (160, 64, 1000);
        let mut rng = rng_stream(1, 1);
        let mut mean_sq = 0.0;
        let mut mean = 0.0;
        for _ in 0..trials {
            let data: Vec<f64> = (0..b * d).map(|_| rng.sample(StandardNormal)).collect();
            let s = center_of(Tensor::new(&[b, d], data).unwrap()).unwrap();
            let n = norm(&s);
            mean += n / trials as f64;
            mean_sq += n * n / trials as f64;
        }
        let want = 1.0 / (b as f64).sqrt();
        assert!((mean - want).abs() < 0.1 * want, "{mean} vs {want}");
        assert!((mean_sq - 1.0 / b as f64).abs() < 0.05 / b as f64, "{mean_sq}");
    }

    #[test]
    fn cv_loss_examples() {
        for (mag, want) in [(0.5, 0.0), (0.8, 0.3)] {
            let mut tape = Tape::no_grad();
            let s = tape.constant(Tensor::new(&[2], vec![mag * 0.6, mag * 0.8]).unwrap());
            let l = cv_loss(&mut tape, s, 0.5);
            assert!((tape.scalar_value(l) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn cv_loss_subgradient_is_zero_at_kink_and_origin() {
        for s in [vec![0.3, 0.4], vec![0.0, 0.0]] {
            let t = Tensor::new(&[2], s.clone()).unwrap().with_requires_grad(true);
            let mut tape = Tape::new();
            let v = tape.leaf(&t);
            // |(0.3, 0.4)| = 0.5 sits on the kink
            let l = cv_loss(&mut tape, v, 0.5);
            let g = tape.backward(l).unwrap();
            let gv = g.get(v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; 2]);
            assert!(gv.iter().all(|&x| x == 0.0), "{s:?}: {gv:?}");
        }
    }

    #[test]
    fn regulated_lr_examples() {
        let st = CvrState::new(CvrConfig::default());
        assert_eq!(st.regulated_lr(1.0).unwrap(), 0.0);
        assert_eq!(st.regulated_lr(0.0).unwrap(), 0.03);
        assert!((st.regulated_lr(0.5).unwrap() - 0.015).abs() < 1e-15);
        assert_eq!(st.regulated_lr(1.0 + 1e-10).unwrap(), 0.0);
        assert!(matches!(st.regulated_lr(1.0 + 1e-6), Err(Error::Contract(_))));
        assert!(matches!(st.regulated_lr(-1e-6), Err(Error::Contract(_))));
    }

    #[test]
    fn gate_examples() {
        let mut st = CvrState::new(CvrConfig::default());
        assert!(st.gate(0.9));
        assert!(!st.gate(0.9));
        assert!(st.gate(0.2));
        assert!(!st.gate(0.4));
        assert_eq!(st.prev_mag, 0.4);
        assert_eq!((st.steps_total, st.steps_updated, st.steps_skipped), (4, 2, 2));
    }

    #[test]
    fn last_accepted_reference_holds_on_skip() {
        let mut st = CvrState::new(CvrConfig { gate_reference: GateReference::LastAccepted, ..Default::default() });
        assert!(st.gate(0.3));
        assert!(!st.gate(0.5));
        assert_eq!(st.prev_mag, 0.3);
        // 0.4 would pass against 0.5 but not against the accepted 0.3
        assert!(!st.gate(0.4));
        assert!(st.gate(0.2));
    }

    #[test]
    fn iid_magnitudes_skip_half() {
        let mut rng = rng_stream(3, 3);
        let mut st = CvrState::new(CvrConfig::default());
        st.gate(rng.random::<f64>());
        for _ in 0..10_000 {
            st.gate(rng.random::<f64>());
        }
        let rate = (st.steps_skipped as f64) / 10_000.0;
        assert!((rate - 0.5).abs() < 0.02, "{rate}");
    }

    #[test]
    fn cv_gradcheck_through_center() {
        let mut rng = rng_stream(4, 4);
        let f0 = Tensor::new(&[5, 3], (0..15).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let loss = |f: &Tensor| -> (f64, Vec<f64>) {
            let t = f.clone().with_requires_grad(true);
            let mut tape = Tape::new();
            let v = tape.leaf(&t);
            let s = center_vector(&mut tape, v).unwrap();
            let l = cv_loss(&mut tape, s, 0.05);
            let g = tape.backward(l).unwrap();
            (tape.scalar_value(l), g.get(v).unwrap().to_vec())
        };
        let (_, ga) = loss(&f0);
        let h = 1e-6;
        let (mut d2, mut n2) = (0.0, 0.0);
        for i in 0..15 {
            let mut up = f0.clone();
            up.data_mut()[i] += h;
            let mut dn = f0.clone();
            dn.data_mut()[i] -= h;
            let fd = (loss(&up).0 - loss(&dn).0) / (2.0 * h);
            d2 += (fd - ga[i]).powi(2);
            n2 += fd * fd;
        }
        assert!((d2 / n2).sqrt() < 1e-4);
    }

    proptest! {
        #[test]
        fn center_norm_at_most_one(seed in 0u64..100_000, b in 1usize..12, d in 1usize..8) {
            let mut rng = rng_stream(seed, 0);
            let data: Vec<f64> = (0..b * d).map(|_| rng.random_range(-5.0..5.0) + 1e-3).collect();
            let s = center_of(Tensor::new(&[b, d], data).unwrap()).unwrap();
            prop_assert!(norm(&s) <= 1.0 + 1e-12);
        }

        #[test]
        fn cv_loss_nonnegative(x in -1.0f64..1.0, y in -1.0f64..1.0, phi in 0.0f64..1.0) {
            let mut tape = Tape::no_grad();
            let s = tape.constant(Tensor::new(&[2], vec![x, y]).unwrap());
            let l = cv_loss(&mut tape, s, phi);
            prop_assert!(tape.scalar_value(l) >= 0.0);
        }

        #[test]
        fn lr_is_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let st = CvrState::new(CvrConfig::default());
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let (e_lo, e_hi) = (st.regulated_lr(lo).unwrap(), st.regulated_lr(hi).unwrap());
            prop_assert!(e_hi <= e_lo);
            prop_assert!((0.0..=0.03).contains(&e_hi));
        }

        #[test]
        fn gate_replay_is_pure(mags in proptest::collection::vec(0.0f64..1.0, 1..60)) {
            let run = || {
                let mut st = CvrState::new(CvrConfig::default());
                mags.iter().map(|&m| st.gate(m)).collect::<Vec<_>>()
            };
            let first = run();
            prop_assert_eq!(&first, &run());
            let mut st = CvrState::new(CvrConfig::default());
            for &m in &mags {
                st.gate(m);
            }
            prop_assert_eq!(st.steps_updated + st.steps_skipped, st.steps_total);
        }
    }
}
