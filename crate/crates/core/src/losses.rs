//! Contrastive loss over sample/augmentation/prototype projections, the signed
//! entropy loss, and their weighted sum.

use crate::error::{Error, Result};
use crate::model::{ComposedModel, GraphModel};
use crate::numerics::{Graph, Tensor, Var};
use crate::prototypes::PrototypeBank;
use crate::pseudo::{normalized_entropy, PseudoLabel};
use crate::scenario::HyperParams;

/// Projection vectors laid out as the known block followed by the unknown
/// block. Known entries carry their pseudo-label class; unknown entries all
/// share the unknown label.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveLayout {
    /// `[known_labels.len() + num_unknown, projection_dim]`.
    pub z: Tensor,
    pub known_labels: Vec<usize>,
    pub num_unknown: usize,
    pub tau: f64,
}

impl ContrastiveLayout {
    pub fn empty(tau: f64) -> Self {
        ContrastiveLayout {
            z: Tensor::zeros(&[0, 0]),
            known_labels: Vec::new(),
            num_unknown: 0,
            tau,
        }
    }

    pub fn len(&self) -> usize {
        self.known_labels.len() + self.num_unknown
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Positive sets `P(i)` within the known block, as weight rows `1/|P(i)|`.
fn positive_weights(known_labels: &[usize], n: usize) -> (Vec<usize>, Vec<f64>) {
    let nk = known_labels.len();
    let mut valid = Vec::new();
    let mut weights = vec![0.0; n * n];
    for (i, &yi) in known_labels.iter().enumerate() {
        let positives: Vec<usize> = (0..nk)
            .filter(|&p| p != i && known_labels[p] == yi)
            .collect();
        if positives.is_empty() {
            continue;
        }
        let w = 1.0 / positives.len() as f64;
        for p in positives {
            weights[i * n + p] = w;
        }
        valid.push(i);
    }
    (valid, weights)
}

/// Differentiable contrastive loss on raw projections `z`.
///
/// For every known anchor `i` with a nonempty positive set, adds
/// `−mean_{p∈P(i)} log(exp(s_ip/τ) / D_i)` where
/// `D_i = Σ_{a≠i, a known} exp(s_ia/τ) + Σ_{u unknown} Σ_{j known} exp(s_uj/τ)`.
/// The second sum of `D_i` does not depend on `i`. Denominators are evaluated
/// with a per-anchor max shift.
pub fn contrastive_loss_on(
    g: &mut Graph,
    z: Var,
    known_labels: &[usize],
    num_unknown: usize,
    tau: f64,
) -> Result<Var> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let nk = known_labels.len();
    let n = nk + num_unknown;
    let (rows, _) = g.value(z).row_view();
    if rows != n || g.value(z).shape().len() != 2 {
        return Err(Error::shape(
            "contrastive_loss",
            &[g.value(z).shape(), &[n]],
        ));
    }
    let (valid, pos_w) = positive_weights(known_labels, n);
    if valid.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let m = valid.len();

    let zn = g.l2_normalize_rows(z)?;
    let sims = g.matmul_nt(zn, zn)?;
    let s = g.scale(sims, 1.0 / tau);
    let s_val = g.value(s).clone();

    // Shared cross term: every (unknown, known) pair.
    let cross_shift = (nk..n)
        .flat_map(|u| (0..nk).map(move |j| (u, j)))
        .map(|(u, j)| s_val.data()[u * n + j])
        .fold(f64::NEG_INFINITY, f64::max);

    // Per-anchor shift covers both parts of its denominator.
    let shifts: Vec<f64> = valid
        .iter()
        .map(|&i| {
            (0..nk)
                .filter(|&a| a != i)
                .map(|a| s_val.data()[i * n + a])
                .fold(cross_shift, f64::max)
        })
        .collect();

    // Σ_{a∈A(i)} exp(s_ia − shift_i)
    let s_rows = g.gather_rows(s, &valid)?;
    let mut shift_mat = Vec::with_capacity(m * n);
    let mut mask_a = Vec::with_capacity(m * n);
    for (r, &i) in valid.iter().enumerate() {
        for a in 0..n {
            shift_mat.push(shifts[r]);
            mask_a.push(if a < nk && a != i { 1.0 } else { 0.0 });
        }
    }
    let shift_c = g.constant(Tensor::matrix(m, n, shift_mat)?);
    let centered = g.sub(s_rows, shift_c)?;
    let e = g.exp(centered);
    let mask_a = g.constant(Tensor::matrix(m, n, mask_a)?);
    let e_a = g.mul(e, mask_a)?;
    let mut denom = g.sum_rows(e_a);

    if num_unknown > 0 {
        let mut mask_c = vec![0.0; n * n];
        for u in nk..n {
            for j in 0..nk {
                mask_c[u * n + j] = 1.0;
            }
        }
        let cs = g.add_scalar(s, -cross_shift);
        let ce = g.exp(cs);
        let mask_c = g.constant(Tensor::matrix(n, n, mask_c)?);
        let ce = g.mul(ce, mask_c)?;
        let cross = g.sum(ce);
        // exp(cross_shift − shift_i) · cross, per anchor
        let zeros = g.constant(Tensor::zeros(&[m, 1]));
        let filled = g.add_broadcast(zeros, cross)?;
        let factors = shifts.iter().map(|&sh| (cross_shift - sh).exp()).collect();
        let factors = g.constant(Tensor::matrix(m, 1, factors)?);
        let scaled = g.mul(filled, factors)?;
        denom = g.add(denom, scaled)?;
    }

    let log_denom = g.ln(denom);
    let log_sum = g.sum(log_denom);
    let log_sum = g.add_scalar(log_sum, shifts.iter().sum());

    let pos_w = g.constant(Tensor::matrix(n, n, pos_w)?);
    let weighted = g.mul(s, pos_w)?;
    let positive = g.sum(weighted);
    g.sub(log_sum, positive)
}

/// Value of the contrastive loss for a fixed layout.
pub fn contrastive_loss(layout: &ContrastiveLayout) -> Result<f64> {
    if layout.known_labels.is_empty() {
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let z = g.constant(layout.z.clone());
    let loss = contrastive_loss_on(
        &mut g,
        z,
        &layout.known_labels,
        layout.num_unknown,
        layout.tau,
    )?;
    g.value(loss).item()
}

/// A layout whose projections live on a graph.
#[derive(Debug, Clone)]
pub struct GraphLayout {
    /// `None` when no sample carries a Known or Unknown tag.
    pub z: Option<Var>,
    pub known_labels: Vec<usize>,
    pub num_unknown: usize,
}

/// Builds the contrastive input for one batch.
///
/// Known-tagged samples contribute `(sample, augmentation, prototype)` in
/// that order; the prototype is dropped when the bank has none for the class
/// yet. Unknown-tagged samples contribute `(sample, augmentation)` after all
/// known entries. Uncertain samples are left out. Sample and augmentation
/// features come from the student `g`; prototypes enter as constants. All
/// rows then go through the projection head.
pub fn build_layout_on(
    g: &mut Graph,
    model: &GraphModel<'_>,
    batch: &Tensor,
    augmented: &Tensor,
    labels: &[PseudoLabel],
    bank: &PrototypeBank,
) -> Result<GraphLayout> {
    let (n, _) = batch.row_view();
    if labels.len() != n || augmented.shape() != batch.shape() {
        return Err(Error::shape(
            "build_layout",
            &[batch.shape(), augmented.shape(), &[labels.len()]],
        ));
    }
    let mut known = Vec::new();
    let mut unknown = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        match l {
            PseudoLabel::Known(c) => known.push((i, *c)),
            PseudoLabel::Unknown => unknown.push(i),
            PseudoLabel::Uncertain => {}
        }
    }
    if known.is_empty() && unknown.is_empty() {
        return Ok(GraphLayout {
            z: None,
            known_labels: Vec::new(),
            num_unknown: 0,
        });
    }

    let both = Tensor::concat_rows(&[batch, augmented])?;
    let input_rows: Vec<usize> = known
        .iter()
        .map(|&(i, _)| i)
        .chain(unknown.iter().copied())
        .flat_map(|i| [i, n + i])
        .collect();
    let x_in = g.constant(both.gather_rows(&input_rows)?);
    let feats = model.features(g, x_in)?;
    let num_feat_rows = input_rows.len();

    let mut proto_rows = Vec::new();
    let mut order = Vec::new();
    let mut known_labels = Vec::new();
    for (j, &(_, c)) in known.iter().enumerate() {
        order.extend([2 * j, 2 * j + 1]);
        known_labels.extend([c, c]);
        if let Some(p) = bank.get(c)? {
            order.push(num_feat_rows + proto_rows.len());
            proto_rows.push(p);
            known_labels.push(c);
        }
    }
    let base = 2 * known.len();
    for j in 0..unknown.len() {
        order.extend([base + 2 * j, base + 2 * j + 1]);
    }

    let pool = if proto_rows.is_empty() {
        feats
    } else {
        let protos = g.constant(Tensor::from_rows(&proto_rows)?);
        g.concat_rows(&[feats, protos])?
    };
    let reps = g.gather_rows(pool, &order)?;
    let z = model.projection(g, reps)?;
    Ok(GraphLayout {
        z: Some(z),
        known_labels,
        num_unknown: 2 * unknown.len(),
    })
}

/// Non-differentiable convenience wrapper around [`build_layout_on`].
pub fn build_layout(
    model: &ComposedModel,
    batch: &Tensor,
    augmented: &Tensor,
    labels: &[PseudoLabel],
    bank: &PrototypeBank,
    tau: f64,
) -> Result<ContrastiveLayout> {
    let mut g = Graph::new();
    let vars = model.params().register_frozen(&mut g);
    let gm = GraphModel::new(&vars);
    let layout = build_layout_on(&mut g, &gm, batch, augmented, labels, bank)?;
    Ok(match layout.z {
        None => ContrastiveLayout::empty(tau),
        Some(z) => ContrastiveLayout {
            z: g.value(z).clone(),
            known_labels: layout.known_labels,
            num_unknown: layout.num_unknown,
            tau,
        },
    })
}

/// Per-row weight in the entropy loss: `+1/N` for known, `−1/N` for unknown.
fn entropy_signs(labels: &[PseudoLabel]) -> Vec<f64> {
    let n = labels.len().max(1) as f64;
    labels
        .iter()
        .map(|l| match l {
            PseudoLabel::Known(_) => 1.0 / n,
            PseudoLabel::Unknown => -1.0 / n,
            PseudoLabel::Uncertain => 0.0,
        })
        .collect()
}

/// Mean normalized entropy of known-tagged rows minus that of unknown-tagged
/// rows, both divided by the full batch size.
pub fn entropy_loss(student_probs: &Tensor, labels: &[PseudoLabel]) -> Result<f64> {
    let (rows, _) = student_probs.row_view();
    if rows != labels.len() {
        return Err(Error::shape(
            "entropy_loss",
            &[student_probs.shape(), &[labels.len()]],
        ));
    }
    let signs = entropy_signs(labels);
    let mut total = 0.0;
    for (row, w) in student_probs.rows().zip(signs) {
        if w != 0.0 {
            total += w * normalized_entropy(row)?;
        }
    }
    Ok(total)
}

/// Differentiable entropy loss from student logits.
pub fn entropy_loss_on(g: &mut Graph, logits: Var, labels: &[PseudoLabel]) -> Result<Var> {
    let (rows, k) = g.value(logits).row_view();
    if rows != labels.len() {
        return Err(Error::shape(
            "entropy_loss",
            &[g.value(logits).shape(), &[labels.len()]],
        ));
    }
    if k < 2 {
        return Err(Error::Degenerate {
            op: "entropy_loss",
            detail: format!("needs at least 2 classes, got {k}"),
        });
    }
    let p = g.softmax_rows(logits);
    let lp = g.ln(p);
    let plp = g.mul(p, lp)?;
    let neg_h = g.sum_rows(plp);
    let entropy = g.scale(neg_h, -1.0 / (k as f64).ln());
    let signs = g.constant(Tensor::matrix(rows, 1, entropy_signs(labels))?);
    let signed = g.mul(entropy, signs)?;
    Ok(g.sum(signed))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    lambda: f64,
}

impl LossWeights {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {lambda}"
            )));
        }
        Ok(LossWeights { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

/// `L_c + λ·L_e`.
pub fn total_loss(contrastive: f64, entropy: f64, weights: LossWeights) -> f64 {
    contrastive + weights.lambda * entropy
}

/// Which terms enter the adaptation objective, and how they are weighted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub tau: f64,
    pub weights: LossWeights,
    pub use_contrastive: bool,
    pub use_entropy: bool,
}

impl LossSettings {
    pub fn from_hyper(hyper: &HyperParams) -> Result<Self> {
        Ok(LossSettings {
            tau: hyper.tau,
            weights: LossWeights::new(hyper.lambda)?,
            use_contrastive: hyper.use_contrastive,
            use_entropy: hyper.use_entropy,
        })
    }
}

/// The adaptation objective for one batch, on a graph.
#[derive(Debug, Clone, Copy)]
pub struct AdaptationLoss {
    /// `None` when disabled or when no sample enters the contrastive layout.
    pub contrastive: Option<Var>,
    /// `None` when disabled.
    pub entropy: Option<Var>,
    pub total: Var,
}

/// Builds `[use_c]·L_c + λ·[use_e]·L_e` for the student registered as `model`.
pub fn adaptation_loss_on(
    g: &mut Graph,
    model: &GraphModel<'_>,
    batch: &Tensor,
    augmented: &Tensor,
    labels: &[PseudoLabel],
    bank: &PrototypeBank,
    settings: &LossSettings,
) -> Result<AdaptationLoss> {
    let mut total = g.constant(Tensor::scalar(0.0));
    let mut contrastive = None;
    if settings.use_contrastive {
        let layout = build_layout_on(g, model, batch, augmented, labels, bank)?;
        if let Some(z) = layout.z {
            let lc =
                contrastive_loss_on(g, z, &layout.known_labels, layout.num_unknown, settings.tau)?;
            total = g.add(total, lc)?;
            contrastive = Some(lc);
        }
    }
    let mut entropy = None;
    if settings.use_entropy {
        let x = g.constant(batch.clone());
        let f = model.features(g, x)?;
        let logits = model.logits(g, f)?;
        let le = entropy_loss_on(g, logits, labels)?;
        let weighted = g.scale(le, settings.weights.lambda());
        total = g.add(total, weighted)?;
        entropy = Some(le);
    }
    Ok(AdaptationLoss {
        contrastive,
        entropy,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::cosine_similarity;

    /// Direct triple loop over anchors, positives, and denominator terms.
    fn naive(layout: &ContrastiveLayout) -> f64 {
        let nk = layout.known_labels.len();
        let n = layout.len();
        let row = |i: usize| layout.z.row(i);
        let e =
            |a: usize, b: usize| (cosine_similarity(row(a), row(b)).unwrap() / layout.tau).exp();
        let mut cross = 0.0;
        for u in nk..n {
            for j in 0..nk {
                cross += e(u, j);
            }
        }
        let mut total = 0.0;
        for i in 0..nk {
            let positives: Vec<usize> = (0..nk)
                .filter(|&p| p != i && layout.known_labels[p] == layout.known_labels[i])
                .collect();
            if positives.is_empty() {
                continue;
            }
            let mut denom = cross;
            for a in 0..nk {
                if a != i {
                    denom += e(i, a);
                }
            }
            let mut inner = 0.0;
            for &p in &positives {
                inner += (e(i, p) / denom).ln();
            }
            total += -inner / positives.len() as f64;
        }
        total
    }

    #[test]
    fn hand_case_three_ln_two() {
        let layout = ContrastiveLayout {
            z: Tensor::matrix(3, 2, vec![0.6, 0.8, 0.6, 0.8, 0.6, 0.8]).unwrap(),
            known_labels: vec![4, 4, 4],
            num_unknown: 0,
            tau: 0.1,
        };
        let got = contrastive_loss(&layout).unwrap();
        assert!((got - 3.0 * 2f64.ln()).abs() < 1e-9, "{got}");
        assert!((naive(&layout) - 3.0 * 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn empty_layout_is_zero() {
        assert_eq!(
            contrastive_loss(&ContrastiveLayout::empty(0.1)).unwrap(),
            0.0
        );
    }

    #[test]
    fn matches_naive_on_fixed_layout() {
        let z = Tensor::matrix(
            7,
            3,
            vec![
                0.3, -1.0, 0.2, 0.5, 0.1, 0.9, -0.4, 0.4, 0.4, 1.0, 0.0, -0.3, 0.2, 0.2, 0.8, -0.7,
                0.1, 0.3, 0.05, -0.6, 0.6,
            ],
        )
        .unwrap();
        let layout = ContrastiveLayout {
            z,
            known_labels: vec![0, 0, 0, 1, 1],
            num_unknown: 2,
            tau: 0.1,
        };
        let got = contrastive_loss(&layout).unwrap();
        assert!(
            (got - naive(&layout)).abs() < 1e-8,
            "{got} vs {}",
            naive(&layout)
        );
    }

    #[test]
    fn scale_invariant() {
        let z = Tensor::matrix(
            5,
            2,
            vec![0.3, -1.0, 0.5, 0.1, -0.4, 0.4, 1.0, 0.2, 0.2, 0.7],
        )
        .unwrap();
        let layout = ContrastiveLayout {
            z: z.clone(),
            known_labels: vec![0, 0, 1],
            num_unknown: 2,
            tau: 0.2,
        };
        let mut scaled = layout.clone();
        for (r, f) in [3.0, 0.01, 7.5, 1.0, 40.0].iter().enumerate() {
            for v in &mut scaled.z.data_mut()[r * 2..r * 2 + 2] {
                *v *= f;
            }
        }
        let a = contrastive_loss(&layout).unwrap();
        let b = contrastive_loss(&scaled).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn unknown_moving_closer_increases_loss() {
        let mk = |u: [f64; 2]| ContrastiveLayout {
            z: Tensor::matrix(4, 2, vec![1.0, 0.0, 0.9, 0.1, u[0], u[1], 0.0, -1.0]).unwrap(),
            known_labels: vec![0, 0],
            num_unknown: 2,
            tau: 0.1,
        };
        let far = contrastive_loss(&mk([-1.0, 0.2])).unwrap();
        let near = contrastive_loss(&mk([0.5, 0.5])).unwrap();
        assert!(near > far);
    }

    #[test]
    fn small_temperature_stays_finite() {
        let layout = ContrastiveLayout {
            z: Tensor::matrix(4, 2, vec![1.0, 0.0, -1.0, 0.0, 1.0, 0.1, -1.0, 0.1]).unwrap(),
            known_labels: vec![0, 0],
            num_unknown: 2,
            tau: 0.001,
        };
        assert!(contrastive_loss(&layout).unwrap().is_finite());
    }

    #[test]
    fn entropy_loss_example() {
        // Two rows with normalized entropy 0.3 (known) and 0.8 (unknown).
        fn row(target: f64) -> Vec<f64> {
            let (mut lo, mut hi) = (0.5, 1.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if normalized_entropy(&[mid, 1.0 - mid]).unwrap() > target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            vec![lo, 1.0 - lo]
        }
        let probs = Tensor::from_rows(&[row(0.3), row(0.8)]).unwrap();
        let l = entropy_loss(&probs, &[PseudoLabel::Known(0), PseudoLabel::Unknown]).unwrap();
        assert!((l - (-0.25)).abs() < 1e-12, "{l}");
    }

    #[test]
    fn entropy_loss_directions() {
        let logits = Tensor::from_rows(&[vec![1.0, 0.2, -0.5], vec![0.7, -0.3, 0.1]]).unwrap();
        let labels = [PseudoLabel::Known(0), PseudoLabel::Unknown];
        let at = |t: &Tensor| entropy_loss(&t.softmax_rows(), &labels).unwrap();
        let base = at(&logits);
        for eps in [1e-3, 1e-1] {
            // Sharpen the known row.
            let mut sharper = logits.clone();
            sharper.data_mut()[..3]
                .iter_mut()
                .for_each(|v| *v *= 1.0 + eps);
            assert!(at(&sharper) < base);
            // Flatten the unknown row.
            let mut flatter = logits.clone();
            flatter.data_mut()[3..]
                .iter_mut()
                .for_each(|v| *v *= 1.0 - eps);
            assert!(at(&flatter) < base);
        }
    }

    #[test]
    fn entropy_loss_degenerate_cases() {
        let probs = Tensor::from_rows(&[vec![0.3, 0.7], vec![0.5, 0.5]]).unwrap();
        assert_eq!(
            entropy_loss(&probs, &[PseudoLabel::Uncertain; 2]).unwrap(),
            0.0
        );
        let one_hot = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(
            entropy_loss(&one_hot, &[PseudoLabel::Known(0), PseudoLabel::Known(1)]).unwrap(),
            0.0
        );
    }

    #[test]
    fn entropy_graph_matches_plain() {
        let logits =
            Tensor::matrix(3, 3, vec![0.2, 1.5, -0.3, 2.0, 2.0, 2.0, -1.0, 4.0, 0.5]).unwrap();
        let labels = [
            PseudoLabel::Known(1),
            PseudoLabel::Unknown,
            PseudoLabel::Known(1),
        ];
        let mut g = Graph::new();
        let lv = g.constant(logits.clone());
        let l = entropy_loss_on(&mut g, lv, &labels).unwrap();
        let plain = entropy_loss(&logits.softmax_rows(), &labels).unwrap();
        assert!((g.value(l).item().unwrap() - plain).abs() < 1e-14);
    }

    #[test]
    fn total_loss_combines() {
        let w = LossWeights::new(0.1).unwrap();
        assert!((total_loss(2.0, -0.25, w) - 1.975).abs() < 1e-15);
        assert!(LossWeights::new(-0.1).is_err());
        let tiny = LossWeights::new(1e-300).unwrap();
        assert_eq!(total_loss(2.0, -0.25, tiny), 2.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn layout_strategy() -> impl Strategy<Value = ContrastiveLayout> {
            (0usize..=4, 0usize..=3, 2usize..5).prop_flat_map(|(nk_samples, nu, dim)| {
                let nk = nk_samples * 3;
                let n = nk + 2 * nu;
                (
                    proptest::collection::vec(0.1f64..1.0, n * dim).prop_map(move |mut v| {
                        for (i, x) in v.iter_mut().enumerate() {
                            if (i * 7 + 3) % 5 == 0 {
                                *x = -*x;
                            }
                        }
                        Tensor::matrix(n, dim, v).unwrap()
                    }),
                    proptest::collection::vec(0usize..3, nk_samples),
                    0.05f64..1.0,
                )
                    .prop_map(move |(z, classes, tau)| ContrastiveLayout {
                        z,
                        known_labels: classes.iter().flat_map(|&c| [c, c, c]).collect(),
                        num_unknown: 2 * nu,
                        tau,
                    })
            })
        }

        proptest! {
            #[test]
            fn production_matches_naive(layout in layout_strategy()) {
                let a = contrastive_loss(&layout).unwrap();
                prop_assert!((a - naive(&layout)).abs() < 1e-8);
            }

            #[test]
            fn label_preserving_permutation_invariant(layout in layout_strategy(), rot in 0usize..20) {
                let nk = layout.known_labels.len();
                let n = layout.len();
                prop_assume!(nk > 0);
                let mut known_perm: Vec<usize> = (0..nk).collect();
                known_perm.rotate_left(rot % nk);
                let mut unk_perm: Vec<usize> = (nk..n).collect();
                unk_perm.reverse();
                let perm: Vec<usize> = known_perm.iter().chain(&unk_perm).copied().collect();
                let permuted = ContrastiveLayout {
                    z: layout.z.gather_rows(&perm).unwrap(),
                    known_labels: known_perm.iter().map(|&i| layout.known_labels[i]).collect(),
                    num_unknown: layout.num_unknown,
                    tau: layout.tau,
                };
                let a = contrastive_loss(&layout).unwrap();
                let b = contrastive_loss(&permuted).unwrap();
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
