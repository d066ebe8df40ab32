//! Balance error rate and the resolved-at-accuracy protocol.
//!
//! ```text
//! BER = (1 - (TP / (TP + FN) + TN / (TN + FP)) / 2) * 100
//! ```

use std::collections::BTreeMap;
use std::fmt;

use crate::data::Category;
use crate::error::{Error, Result};
use crate::ops::sigmoid;
use crate::tensor::Tensor;

pub const RESOLVED_THRESHOLD: f64 = 0.90;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub true_pos: u64,
    pub true_neg: u64,
    pub false_pos: u64,
    pub false_neg: u64,
}

fn check_binary(t: &Tensor, what: &str) -> Result<()> {
    if t.data().iter().all(|&v| v == 0.0 || v == 1.0) {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{what} mask must be binary")))
    }
}

impl Confusion {
    pub fn from_masks(pred: &Tensor, gt: &Tensor) -> Result<Self> {
        gt.expect_shape(pred.shape())?;
        check_binary(pred, "predicted")?;
        check_binary(gt, "ground-truth")?;
        let mut c = Confusion::default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            match (p == 1.0, g == 1.0) {
                (true, true) => c.true_pos += 1,
                (false, false) => c.true_neg += 1,
                (true, false) => c.false_pos += 1,
                (false, true) => c.false_neg += 1,
            }
        }
        Ok(c)
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.true_pos += other.true_pos;
        self.true_neg += other.true_neg;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
    }

    pub fn total(&self) -> u64 {
        self.true_pos + self.true_neg + self.false_pos + self.false_neg
    }

    pub fn accuracy(&self) -> f64 {
        (self.true_pos + self.true_neg) as f64 / self.total() as f64
    }

    /// Shadow error rate in percent; `None` without shadow pixels in the
    /// ground truth.
    pub fn ber_shadow(&self) -> Option<f64> {
        let p = self.true_pos + self.false_neg;
        (p > 0).then(|| (100 * self.false_neg) as f64 / p as f64)
    }

    /// Non-shadow error rate in percent; `None` without non-shadow pixels.
    pub fn ber_nonshadow(&self) -> Option<f64> {
        let n = self.true_neg + self.false_pos;
        (n > 0).then(|| (100 * self.false_pos) as f64 / n as f64)
    }

    /// `None` when either class is absent from the ground truth. Evaluated
    /// as one integer ratio, so the result is the correctly rounded value.
    pub fn ber(&self) -> Option<f64> {
        let p = self.true_pos + self.false_neg;
        let n = self.true_neg + self.false_pos;
        if p == 0 || n == 0 {
            return None;
        }
        let errors = 50 * (u128::from(self.false_neg) * u128::from(n) + u128::from(self.false_pos) * u128::from(p));
        Some(errors as f64 / (u128::from(p) * u128::from(n)) as f64)
    }
}

/// BER of a single prediction; see [`Confusion`] for pooling over a set.
pub fn ber(pred: &Tensor, gt: &Tensor) -> Result<Confusion> {
    Confusion::from_masks(pred, gt)
}

/// True iff pixel accuracy exceeds `threshold`.
pub fn resolved_at_threshold(pred: &Tensor, gt: &Tensor, threshold: f64) -> Result<bool> {
    Ok(Confusion::from_masks(pred, gt)?.accuracy() > threshold)
}

/// `sigmoid(logit) >= 0.5` marks shadow.
pub fn binarize_logits(logits: &Tensor) -> Tensor {
    logits.map(|v| if sigmoid(v) >= 0.5 { 1.0 } else { 0.0 })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ResolvedCount {
    pub resolved: u64,
    pub total: u64,
}

impl ResolvedCount {
    pub fn percent(&self) -> Option<f64> {
        (self.total > 0).then(|| self.resolved as f64 / self.total as f64 * 100.0)
    }
}

/// Pooled statistics over an evaluation set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub confusion: Confusion,
    pub resolved: ResolvedCount,
    pub by_category: BTreeMap<Category, ResolvedCount>,
}

impl EvalReport {
    pub fn add(&mut self, pred: &Tensor, gt: &Tensor, category: Option<Category>) -> Result<()> {
        let c = Confusion::from_masks(pred, gt)?;
        self.confusion.merge(&c);
        let ok = c.accuracy() > RESOLVED_THRESHOLD;
        let bump = |r: &mut ResolvedCount| {
            r.total += 1;
            r.resolved += ok as u64;
        };
        bump(&mut self.resolved);
        if let Some(cat) = category {
            bump(self.by_category.entry(cat).or_default());
        }
        Ok(())
    }

    pub fn ber(&self) -> Option<f64> {
        self.confusion.ber()
    }

    pub fn ber_shadow(&self) -> Option<f64> {
        self.confusion.ber_shadow()
    }

    pub fn ber_nonshadow(&self) -> Option<f64> {
        self.confusion.ber_nonshadow()
    }

    pub fn resolved_pct(&self, category: Category) -> Option<f64> {
        self.by_category.get(&category).and_then(ResolvedCount::percent)
    }

    /// `key = value` lines; absent quantities are written as `absent`.
    pub fn to_key_values(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("absent".to_string(), |x| format!("{x:.6}"));
        let c = &self.confusion;
        let mut s = format!(
            "ber = {}\nber_shadow = {}\nber_nonshadow = {}\ntp = {}\ntn = {}\nfp = {}\nfn = {}\nimages = {}\nresolved_pct = {}\n",
            fmt(self.ber()),
            fmt(self.ber_shadow()),
            fmt(self.ber_nonshadow()),
            c.true_pos,
            c.true_neg,
            c.false_pos,
            c.false_neg,
            self.resolved.total,
            fmt(self.resolved.percent()),
        );
        for (cat, r) in &self.by_category {
            s.push_str(&format!("resolved_pct.{cat} = {}\n", fmt(r.percent())));
        }
        s
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fmt = |v: Option<f64>| v.map_or("absent".to_string(), |x| format!("{x:.2}"));
        writeln!(f, "{:<32} {:>10}", "metric", "value")?;
        writeln!(f, "{:<32} {:>10}", "BER", fmt(self.ber()))?;
        writeln!(f, "{:<32} {:>10}", "BER shadow", fmt(self.ber_shadow()))?;
        writeln!(f, "{:<32} {:>10}", "BER non-shadow", fmt(self.ber_nonshadow()))?;
        writeln!(f, "{:<32} {:>10}", "resolved (all)", fmt(self.resolved.percent()))?;
        for (cat, r) in &self.by_category {
            writeln!(f, "{:<32} {:>10}", format!("resolved ({cat})"), fmt(r.percent()))?;
        }
        write!(f, "{:<32} {:>10}", "images", self.resolved.total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn counts(tp: u64, fneg: u64, tn: u64, fp: u64) -> Confusion {
        Confusion {
            true_pos: tp,
            true_neg: tn,
            false_pos: fp,
            false_neg: fneg,
        }
    }

    fn random_mask(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Tensor {
        Tensor::from_fn([1, n], |_| rng.gen_bool(p) as u8 as f64)
    }

    #[test]
    fn hand_values() {
        assert_eq!(counts(90, 10, 80, 20).ber(), Some(15.0));
        let gt = Tensor::new([1, 4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(ber(&gt, &gt).unwrap().ber(), Some(0.0));
        let inv = gt.map(|v| 1.0 - v);
        assert_eq!(ber(&inv, &gt).unwrap().ber(), Some(100.0));
    }

    #[test]
    fn absent_class_is_reported_absent() {
        let gt = Tensor::zeros([1, 4]);
        let c = ber(&gt, &gt).unwrap();
        assert_eq!(c.ber_shadow(), None);
        assert_eq!(c.ber_nonshadow(), Some(0.0));
        assert_eq!(c.ber(), None);
        let r = EvalReport::default();
        assert!(r.to_key_values().contains("ber = absent"));
    }

    #[test]
    fn resolved_threshold_is_strict() {
        let gt = Tensor::zeros([64, 64]);
        let flip = |k: usize| Tensor::from_fn([64, 64], |i| (i < k) as u8 as f64);
        assert!(!resolved_at_threshold(&flip(410), &gt, RESOLVED_THRESHOLD).unwrap());
        assert!(resolved_at_threshold(&flip(409), &gt, RESOLVED_THRESHOLD).unwrap());
        assert!(resolved_at_threshold(&gt, &gt, RESOLVED_THRESHOLD).unwrap());
    }

    #[test]
    fn ties_go_to_shadow() {
        let l = Tensor::new([3], vec![0.0, -1e-300, -1.0]).unwrap();
        assert_eq!(binarize_logits(&l).data(), &[1.0, 1.0, 0.0]);
    }

    #[test]
    fn relabeling_swaps_class_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (p, g) = (random_mask(&mut rng, 300, 0.4), random_mask(&mut rng, 300, 0.3));
        let a = ber(&p, &g).unwrap();
        let b = ber(&p.map(|v| 1.0 - v), &g.map(|v| 1.0 - v)).unwrap();
        assert_eq!(a.ber_shadow(), b.ber_nonshadow());
        assert_eq!(a.ber_nonshadow(), b.ber_shadow());
        assert!((a.ber().unwrap() - b.ber().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn pooled_equals_concatenated() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut report = EvalReport::default();
        let (mut all_p, mut all_g) = (Vec::new(), Vec::new());
        for _ in 0..5 {
            let (p, g) = (random_mask(&mut rng, 50, 0.5), random_mask(&mut rng, 50, 0.2));
            report.add(&p, &g, None).unwrap();
            all_p.extend_from_slice(p.data());
            all_g.extend_from_slice(g.data());
        }
        let whole = ber(&Tensor::new([250], all_p).unwrap(), &Tensor::new([250], all_g).unwrap()).unwrap();
        assert_eq!(report.confusion, whole);
        assert_eq!(report.ber(), whole.ber());
    }

    #[test]
    fn non_binary_masks_are_rejected() {
        let gt = Tensor::zeros([4]);
        assert!(ber(&Tensor::full([4], 0.5), &gt).is_err());
        assert!(ber(&Tensor::zeros([5]), &gt).is_err());
    }
}
