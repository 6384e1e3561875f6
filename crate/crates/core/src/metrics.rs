//! Dice, precision, and sensitivity over binary masks, with volume-level
//! evaluation reports.

use crate::error::{Error, Result};
use crate::volume::{restack, Volume, Voxels};

/// Binarize probabilities: 1 where prob >= t, else 0.
pub fn threshold_probs(probs: &[f32], t: f32) -> Vec<u8> {
    probs.iter().map(|&p| (p >= t) as u8).collect()
}

/// Binarize an f32 probability volume into a u8 label volume.
pub fn threshold_volume(v: &Volume, t: f32) -> Result<Volume> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::config(format!("threshold {t} must be in (0,1)")));
    }
    let probs = v.f32_data()?;
    let mut out = Volume::new(v.dims, Voxels::U8(threshold_probs(probs, t)))?;
    out.meta = v.meta.clone();
    Ok(out)
}

/// Raw overlap counts: |P|, |T|, |P n T|.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub p: u64,
    pub t: u64,
    pub pt: u64,
}

impl Counts {
    pub fn add(&mut self, other: Counts) {
        self.p += other.p;
        self.t += other.t;
        self.pt += other.pt;
    }
}

pub fn mask_counts(pred: &[u8], truth: &[u8]) -> Result<Counts> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!(
            "mask length mismatch: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut c = Counts::default();
    for (&a, &b) in pred.iter().zip(truth) {
        c.p += (a != 0) as u64;
        c.t += (b != 0) as u64;
        c.pt += (a != 0 && b != 0) as u64;
    }
    Ok(c)
}

/// 2|P n T| / (|P| + |T|); both masks empty counts as perfect agreement.
pub fn dice_from_counts(c: Counts) -> f64 {
    if c.p + c.t == 0 {
        1.0
    } else {
        2.0 * c.pt as f64 / (c.p + c.t) as f64
    }
}

/// |P n T| / |P|; an empty prediction scores 1 against an empty truth and 0
/// against a non-empty one.
pub fn precision_from_counts(c: Counts) -> f64 {
    if c.p == 0 {
        if c.t == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        c.pt as f64 / c.p as f64
    }
}

/// |P n T| / |T|; an empty truth scores 1 against an empty prediction and 0
/// against a non-empty one.
pub fn sensitivity_from_counts(c: Counts) -> f64 {
    if c.t == 0 {
        if c.p == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        c.pt as f64 / c.t as f64
    }
}

pub fn dice(pred: &[u8], truth: &[u8]) -> Result<f64> {
    Ok(dice_from_counts(mask_counts(pred, truth)?))
}

pub fn precision(pred: &[u8], truth: &[u8]) -> Result<f64> {
    Ok(precision_from_counts(mask_counts(pred, truth)?))
}

pub fn sensitivity(pred: &[u8], truth: &[u8]) -> Result<f64> {
    Ok(sensitivity_from_counts(mask_counts(pred, truth)?))
}

#[derive(Clone, Debug)]
pub struct ClassMetrics {
    pub dice: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub counts: Counts,
}

impl ClassMetrics {
    pub fn from_counts(counts: Counts) -> Self {
        ClassMetrics {
            dice: dice_from_counts(counts),
            precision: precision_from_counts(counts),
            sensitivity: sensitivity_from_counts(counts),
            counts,
        }
    }
}

/// Per-class metrics over one evaluation unit (usually a 3-D volume).
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
}

impl MetricsReport {
    pub fn mean_dice(&self) -> f64 {
        self.classes.iter().map(|c| c.dice).sum::<f64>() / self.classes.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,dice,precision,sensitivity,p,t,pt\n");
        for (k, c) in self.classes.iter().enumerate() {
            out.push_str(&format!(
                "{k},{},{},{},{},{},{}\n",
                c.dice, c.precision, c.sensitivity, c.counts.p, c.counts.t, c.counts.pt
            ));
        }
        out
    }
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "class      dice  precision  sensitivity          |P|          |T|        |PnT|")?;
        for (k, c) in self.classes.iter().enumerate() {
            writeln!(
                f,
                "{k:<5} {:>9.4} {:>10.4} {:>12.4} {:>12} {:>12} {:>12}",
                c.dice, c.precision, c.sensitivity, c.counts.p, c.counts.t, c.counts.pt
            )?;
        }
        write!(
            f,
            "mean  {:>9.4} {:>10.4} {:>12.4}",
            self.mean_dice(),
            self.classes.iter().map(|c| c.precision).sum::<f64>() / self.classes.len() as f64,
            self.classes.iter().map(|c| c.sensitivity).sum::<f64>() / self.classes.len() as f64,
        )
    }
}

/// Pool per-volume reports into one by summing counts per class and
/// recomputing the metrics from the pooled counts, so the count identities
/// still hold for the aggregate.
pub fn aggregate_reports(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::data("no reports to aggregate".to_string()))?;
    let classes = first.classes.len();
    let mut pooled = vec![Counts::default(); classes];
    for r in reports {
        if r.classes.len() != classes {
            return Err(Error::shape("reports disagree in class count".to_string()));
        }
        for (k, c) in r.classes.iter().enumerate() {
            pooled[k].add(c.counts);
        }
    }
    Ok(MetricsReport {
        classes: pooled.into_iter().map(ClassMetrics::from_counts).collect(),
    })
}

/// Restack per-slice probability maps, binarize at `t`, and score every class
/// over the whole 3-D volume.
pub fn evaluate_volume(pred_slices: &[Volume], gt: &Volume, t: f32) -> Result<MetricsReport> {
    if !(0.0..1.0).contains(&t) || t <= 0.0 {
        return Err(Error::config(format!("threshold {t} must be in (0,1)")));
    }
    if pred_slices.len() != gt.depth() {
        return Err(Error::shape(format!(
            "{} prediction slices for a volume of depth {}",
            pred_slices.len(),
            gt.depth()
        )));
    }
    let probs = restack(pred_slices)?;
    if (probs.channels(), probs.height(), probs.width())
        != (gt.channels(), gt.height(), gt.width())
    {
        return Err(Error::shape(format!(
            "prediction dims {:?} do not match ground truth {:?}",
            probs.dims, gt.dims
        )));
    }
    let binary = threshold_volume(&probs, t)?;
    let pred_data = binary.u8_data()?;
    let gt_data = gt.u8_data()?;
    let per_class = gt.height() * gt.width() * gt.depth();
    let mut classes = Vec::with_capacity(gt.channels());
    for k in 0..gt.channels() {
        let counts = mask_counts(
            &pred_data[k * per_class..(k + 1) * per_class],
            &gt_data[k * per_class..(k + 1) * per_class],
        )?;
        classes.push(ClassMetrics::from_counts(counts));
    }
    Ok(MetricsReport { classes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn threshold_tie_rule_and_edges() {
        assert_eq!(threshold_probs(&[0.5, 0.49, 0.51], 0.5), vec![1, 0, 1]);
        assert_eq!(threshold_probs(&[0.1, 0.2], 0.5), vec![0, 0]);
        // Idempotent on binary input at t = 0.5.
        let bin = threshold_probs(&[0.0, 1.0, 1.0], 0.5);
        let again = threshold_probs(&bin.iter().map(|&v| v as f32).collect::<Vec<_>>(), 0.5);
        assert_eq!(bin, again);
    }

    #[test]
    fn dice_examples() {
        assert_eq!(dice(&[1, 1, 0], &[1, 1, 0]).unwrap(), 1.0);
        assert_eq!(dice(&[1, 0, 0], &[0, 1, 1]).unwrap(), 0.0);
        // |P| = |T| = 4, |PnT| = 2.
        let p = [1, 1, 1, 1, 0, 0, 0, 0];
        let t = [1, 1, 0, 0, 1, 1, 0, 0];
        assert_eq!(dice(&p, &t).unwrap(), 0.5);
        assert!(dice(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn precision_sensitivity_containment() {
        // P strictly inside T.
        let p = [1, 0, 0, 0];
        let t = [1, 1, 1, 0];
        assert_eq!(precision(&p, &t).unwrap(), 1.0);
        assert!(sensitivity(&p, &t).unwrap() < 1.0);
        // T strictly inside P.
        assert_eq!(sensitivity(&t, &p).unwrap(), 1.0);
        assert!(precision(&t, &p).unwrap() < 1.0);
        // |P|=2, |T|=4, |PnT|=2.
        let p2 = [1, 1, 0, 0, 0];
        let t2 = [1, 1, 1, 1, 0];
        assert_eq!(precision(&p2, &t2).unwrap(), 1.0);
        assert_eq!(sensitivity(&p2, &t2).unwrap(), 0.5);
    }

    #[test]
    fn empty_set_conventions() {
        let empty = [0u8; 4];
        let some = [1u8, 0, 0, 0];
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert_eq!(precision(&empty, &empty).unwrap(), 1.0);
        assert_eq!(sensitivity(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice(&empty, &some).unwrap(), 0.0);
        assert_eq!(precision(&empty, &some).unwrap(), 0.0);
        assert_eq!(sensitivity(&some, &empty).unwrap(), 0.0);
    }

    #[test]
    fn duality_and_harmonic_identity_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.gen_range(1..40);
            let p: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
            let t: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
            assert_eq!(dice(&p, &t).unwrap(), dice(&t, &p).unwrap());
            assert_eq!(precision(&p, &t).unwrap(), sensitivity(&t, &p).unwrap());
            let d = dice(&p, &t).unwrap();
            assert!((0.0..=1.0).contains(&d));
            let pr = precision(&p, &t).unwrap();
            let se = sensitivity(&p, &t).unwrap();
            if pr + se > 0.0 && p.iter().any(|&v| v == 1) && t.iter().any(|&v| v == 1) {
                assert!((d - 2.0 * pr * se / (pr + se)).abs() < 1e-12);
            }
        }
    }

    /// Independent brute-force voxel counter used as the oracle.
    fn brute_force(pred: &[u8], truth: &[u8]) -> (u64, u64, u64) {
        let mut p = 0;
        let mut t = 0;
        let mut pt = 0;
        for i in 0..pred.len() {
            if pred[i] == 1 {
                p += 1;
            }
            if truth[i] == 1 {
                t += 1;
            }
            if pred[i] == 1 && truth[i] == 1 {
                pt += 1;
            }
        }
        (p, t, pt)
    }

    #[test]
    fn counts_match_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..300 {
            let n = rng.gen_range(1..100);
            // Bias some masks toward empty to hit the degenerate rules.
            let density: f64 = rng.gen_range(0.0..1.0);
            let p: Vec<u8> = (0..n).map(|_| (rng.gen_bool(density)) as u8).collect();
            let t: Vec<u8> = (0..n).map(|_| (rng.gen_bool(density)) as u8).collect();
            let c = mask_counts(&p, &t).unwrap();
            let (bp, bt, bpt) = brute_force(&p, &t);
            assert_eq!((c.p, c.t, c.pt), (bp, bt, bpt));
        }
    }

    #[test]
    fn evaluate_volume_perfect_zero_and_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let (c, h, w, d) = (2usize, 4usize, 5usize, 3usize);
        let n = c * h * w * d;
        let gt_data: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
        let gt = Volume::new((c, h, w, d), Voxels::U8(gt_data.clone())).unwrap();

        // Perfect prediction.
        let slices: Vec<Volume> = crate::volume::slice_axial(&gt)
            .iter()
            .map(|s| {
                let probs: Vec<f32> = s.u8_data().unwrap().iter().map(|&v| v as f32).collect();
                Volume::new(s.dims, Voxels::F32(probs)).unwrap()
            })
            .collect();
        let report = evaluate_volume(&slices, &gt, 0.5).unwrap();
        for cm in &report.classes {
            assert_eq!(cm.dice, 1.0);
            assert_eq!(cm.precision, 1.0);
            assert_eq!(cm.sensitivity, 1.0);
        }

        // All-zero prediction against non-empty truth.
        let zero_slices: Vec<Volume> = (0..d)
            .map(|_| Volume::new((c, h, w, 1), Voxels::F32(vec![0.0; c * h * w])).unwrap())
            .collect();
        let report = evaluate_volume(&zero_slices, &gt, 0.5).unwrap();
        for cm in &report.classes {
            assert_eq!(cm.dice, 0.0);
            assert_eq!(cm.precision, 0.0);
            assert_eq!(cm.sensitivity, 0.0);
        }

        // Random prediction against the brute-force counter per class.
        let pred_slices: Vec<Volume> = (0..d)
            .map(|_| {
                let probs: Vec<f32> = (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
                Volume::new((c, h, w, 1), Voxels::F32(probs)).unwrap()
            })
            .collect();
        let report = evaluate_volume(&pred_slices, &gt, 0.5).unwrap();
        let stacked = restack(&pred_slices).unwrap();
        let bin = threshold_volume(&stacked, 0.5).unwrap();
        let per = h * w * d;
        for k in 0..c {
            let (bp, bt, bpt) = brute_force(
                &bin.u8_data().unwrap()[k * per..(k + 1) * per],
                &gt_data[k * per..(k + 1) * per],
            );
            let cm = &report.classes[k];
            assert_eq!((cm.counts.p, cm.counts.t, cm.counts.pt), (bp, bt, bpt));
        }
    }

    #[test]
    fn volume_counts_equal_summed_slice_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (h, w, d) = (3usize, 4usize, 5usize);
        let per = h * w;
        let pred: Vec<u8> = (0..per * d).map(|_| rng.gen_range(0..=1)).collect();
        let truth: Vec<u8> = (0..per * d).map(|_| rng.gen_range(0..=1)).collect();
        let whole = mask_counts(&pred, &truth).unwrap();
        let mut summed = Counts::default();
        for z in 0..d {
            summed.add(mask_counts(&pred[z * per..(z + 1) * per], &truth[z * per..(z + 1) * per]).unwrap());
        }
        assert_eq!(whole, summed);
    }
}
