//! Feature extractor `g`, classifier `h`, projection head, and the
//! student/teacher pair with its EMA teacher update.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParameterSet, Tensor, Var};

pub const G_L0_W: &str = "g.0.weight";
pub const G_L0_B: &str = "g.0.bias";
pub const G_L1_W: &str = "g.1.weight";
pub const G_L1_B: &str = "g.1.bias";
pub const H_W: &str = "h.weight";
pub const H_B: &str = "h.bias";
pub const P_L0_W: &str = "proj.0.weight";
pub const P_L0_B: &str = "proj.0.bias";
pub const P_L1_W: &str = "proj.1.weight";
pub const P_L1_B: &str = "proj.1.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_dim: usize,
    /// Width of the hidden layer inside `g`.
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub num_known_classes: usize,
    /// Width of the hidden layer inside the projection head.
    pub projection_hidden_dim: usize,
    pub projection_dim: usize,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("feature_dim", self.feature_dim),
            ("num_known_classes", self.num_known_classes),
            ("projection_hidden_dim", self.projection_hidden_dim),
            ("projection_dim", self.projection_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("network {name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// `(name, shape, fan_in)` for every parameter.
    fn layout(&self) -> [(&'static str, Vec<usize>, usize); 10] {
        let c = self;
        [
            (G_L0_W, vec![c.input_dim, c.hidden_dim], c.input_dim),
            (G_L0_B, vec![c.hidden_dim], c.input_dim),
            (G_L1_W, vec![c.hidden_dim, c.feature_dim], c.hidden_dim),
            (G_L1_B, vec![c.feature_dim], c.hidden_dim),
            (H_W, vec![c.feature_dim, c.num_known_classes], c.feature_dim),
            (H_B, vec![c.num_known_classes], c.feature_dim),
            (
                P_L0_W,
                vec![c.feature_dim, c.projection_hidden_dim],
                c.feature_dim,
            ),
            (P_L0_B, vec![c.projection_hidden_dim], c.feature_dim),
            (
                P_L1_W,
                vec![c.projection_hidden_dim, c.projection_dim],
                c.projection_hidden_dim,
            ),
            (P_L1_B, vec![c.projection_dim], c.projection_hidden_dim),
        ]
    }
}

/// `f = h ∘ g` plus a projection head on top of `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedModel {
    config: NetworkConfig,
    params: ParameterSet,
}

fn uniform_init<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

impl ComposedModel {
    /// Weights and biases uniform in `±1/√fan_in`.
    pub fn init<R: Rng>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterSet::new();
        for (name, shape, fan_in) in config.layout() {
            params.insert(name, uniform_init(rng, &shape, fan_in));
        }
        Ok(ComposedModel { config, params })
    }

    pub fn zeros(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterSet::new();
        for (name, shape, _) in config.layout() {
            params.insert(name, Tensor::zeros(&shape));
        }
        Ok(ComposedModel { config, params })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_parts(config: NetworkConfig, params: ParameterSet) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if params.len() != layout.len() {
            return Err(Error::Structure(format!(
                "expected {} parameters, got {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape, _) in layout {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Structure(format!(
                        "{name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Structure(format!("missing parameter {name}"))),
            }
        }
        Ok(ComposedModel { config, params })
    }

    /// Fresh projection head; `g` and `h` are untouched.
    pub fn reinit_projection<R: Rng>(&mut self, rng: &mut R) {
        for (name, shape, fan_in) in self.config.layout() {
            if name.starts_with("proj.") {
                self.params.insert(name, uniform_init(rng, &shape, fan_in));
            }
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    fn p(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .expect("model parameters are complete")
    }

    fn check_width(&self, op: &'static str, x: &Tensor, width: usize) -> Result<()> {
        match x.shape() {
            [_, w] if *w == width => Ok(()),
            s => Err(Error::shape(op, &[s, &[width]])),
        }
    }

    /// Rows of `g(x)` for a `[n, input_dim]` batch.
    pub fn forward_features(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_width("forward_features", batch, self.config.input_dim)?;
        let h = batch
            .matmul(self.p(G_L0_W))?
            .add_bias(self.p(G_L0_B))?
            .relu();
        Ok(h.matmul(self.p(G_L1_W))?.add_bias(self.p(G_L1_B))?.relu())
    }

    /// Logits `h(features)` and their row softmax.
    pub fn forward_logits(&self, features: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_width("forward_logits", features, self.config.feature_dim)?;
        let logits = features.matmul(self.p(H_W))?.add_bias(self.p(H_B))?;
        let probs = logits.softmax_rows();
        Ok((logits, probs))
    }

    pub fn predict_probs(&self, batch: &Tensor) -> Result<Tensor> {
        let f = self.forward_features(batch)?;
        Ok(self.forward_logits(&f)?.1)
    }

    /// Raw (unnormalized) projections of feature rows.
    pub fn forward_projection(&self, features: &Tensor) -> Result<Tensor> {
        self.check_width("forward_projection", features, self.config.feature_dim)?;
        let h = features
            .matmul(self.p(P_L0_W))?
            .add_bias(self.p(P_L0_B))?
            .relu();
        h.matmul(self.p(P_L1_W))?.add_bias(self.p(P_L1_B))
    }
}

/// Builds model sub-networks on a [`Graph`] from registered parameter vars.
pub struct GraphModel<'a> {
    vars: &'a BTreeMap<String, Var>,
}

impl<'a> GraphModel<'a> {
    pub fn new(vars: &'a BTreeMap<String, Var>) -> Self {
        GraphModel { vars }
    }

    fn v(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn features(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = g.linear(x, self.v(G_L0_W), self.v(G_L0_B))?;
        let h = g.relu(h);
        let f = g.linear(h, self.v(G_L1_W), self.v(G_L1_B))?;
        Ok(g.relu(f))
    }

    pub fn logits(&self, g: &mut Graph, features: Var) -> Result<Var> {
        g.linear(features, self.v(H_W), self.v(H_B))
    }

    pub fn projection(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let h = g.linear(features, self.v(P_L0_W), self.v(P_L0_B))?;
        let h = g.relu(h);
        g.linear(h, self.v(P_L1_W), self.v(P_L1_B))
    }
}

/// Trainable student and its EMA teacher.
#[derive(Debug, Clone)]
pub struct StudentTeacherPair {
    student: ComposedModel,
    teacher: ComposedModel,
    alpha: f64,
}

impl StudentTeacherPair {
    /// Both networks start from the same weights.
    pub fn new(source: ComposedModel, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!(
                "alpha must be in [0,1], got {alpha}"
            )));
        }
        Ok(StudentTeacherPair {
            teacher: source.clone(),
            student: source,
            alpha,
        })
    }

    pub fn from_parts(student: ComposedModel, teacher: ComposedModel, alpha: f64) -> Result<Self> {
        student.params.check_same_structure(&teacher.params)?;
        let mut pair = Self::new(student, alpha)?;
        pair.teacher = teacher;
        Ok(pair)
    }

    pub fn student(&self) -> &ComposedModel {
        &self.student
    }

    pub fn student_mut(&mut self) -> &mut ComposedModel {
        &mut self.student
    }

    pub fn teacher(&self) -> &ComposedModel {
        &self.teacher
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `teacher ← α·teacher + (1−α)·student` for every parameter.
    pub fn ema_update(&mut self) -> Result<()> {
        self.student
            .params
            .check_same_structure(&self.teacher.params)?;
        let a = self.alpha;
        for ((_, t), (_, s)) in self
            .teacher
            .params
            .iter_mut()
            .zip(self.student.params.iter())
        {
            for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
                *tv += (1.0 - a) * (sv - *tv);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> NetworkConfig {
        NetworkConfig {
            input_dim: 3,
            hidden_dim: 8,
            feature_dim: 6,
            num_known_classes: 4,
            projection_hidden_dim: 5,
            projection_dim: 3,
        }
    }

    fn model(seed: u64) -> ComposedModel {
        ComposedModel::init(cfg(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn batch() -> Tensor {
        Tensor::matrix(3, 3, vec![0.5, -1.0, 2.0, 0.1, 0.2, 0.3, -2.0, 1.0, 0.0]).unwrap()
    }

    #[test]
    fn zero_g_gives_zero_features() {
        let m = ComposedModel::zeros(cfg()).unwrap();
        let f = m.forward_features(&batch()).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_h_gives_uniform_probs() {
        let mut m = model(1);
        for name in [H_W, H_B] {
            let shape = m.params().get(name).unwrap().shape().to_vec();
            m.params_mut().insert(name, Tensor::zeros(&shape));
        }
        let p = m.predict_probs(&batch()).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_closed_form() {
        let (_, p) = {
            let logits = Tensor::matrix(1, 2, vec![9f64.ln(), 0.0]).unwrap();
            (logits.clone(), logits.softmax_rows())
        };
        assert!((p.data()[0] - 0.9).abs() < 1e-15);
        assert!((p.data()[1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn identical_rows_identical_features() {
        let m = model(2);
        let x = Tensor::matrix(2, 3, vec![0.3, 0.4, 0.5, 0.3, 0.4, 0.5]).unwrap();
        let f = m.forward_features(&x).unwrap();
        assert_eq!(f.row(0), f.row(1));
    }

    #[test]
    fn rows_are_independent() {
        let m = model(3);
        let x = batch();
        let perm = [2, 0, 1];
        let xp = x.gather_rows(&perm).unwrap();
        let f = m.forward_features(&x).unwrap();
        let p = m.forward_logits(&f).unwrap().1;
        let z = m.forward_projection(&f).unwrap();
        let fp = m.forward_features(&xp).unwrap();
        assert_eq!(
            m.forward_logits(&fp).unwrap().1,
            p.gather_rows(&perm).unwrap()
        );
        assert_eq!(
            m.forward_projection(&fp).unwrap(),
            z.gather_rows(&perm).unwrap()
        );
    }

    #[test]
    fn zero_projection_is_degenerate_after_normalization() {
        let mut m = model(4);
        for (name, t) in m.params_mut().iter_mut() {
            if name.starts_with("proj.") {
                t.data_mut().fill(0.0);
            }
        }
        let f = m.forward_features(&batch()).unwrap();
        let z = m.forward_projection(&f).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(z.l2_normalize_rows().is_err());
    }

    #[test]
    fn wrong_width_is_shape_error() {
        let m = model(5);
        let x = Tensor::zeros(&[2, 4]);
        assert!(matches!(
            m.forward_features(&x),
            Err(Error::Shape {
                op: "forward_features",
                ..
            })
        ));
    }

    #[test]
    fn graph_and_plain_forward_agree() {
        let m = model(6);
        let x = batch();
        let mut g = Graph::new();
        let vars = m.params().register(&mut g);
        let gm = GraphModel::new(&vars);
        let xv = g.constant(x.clone());
        let f = gm.features(&mut g, xv).unwrap();
        let l = gm.logits(&mut g, f).unwrap();
        let z = gm.projection(&mut g, f).unwrap();
        let plain_f = m.forward_features(&x).unwrap();
        assert_eq!(g.value(f), &plain_f);
        assert_eq!(g.value(l), &m.forward_logits(&plain_f).unwrap().0);
        assert_eq!(g.value(z), &m.forward_projection(&plain_f).unwrap());
    }

    #[test]
    fn fixed_seed_regression_values() {
        let m = model(42);
        let x = Tensor::matrix(1, 3, vec![0.5, -0.25, 1.0]).unwrap();
        let f = m.forward_features(&x).unwrap();
        let z = m.forward_projection(&f).unwrap();
        let golden_f: &[f64] = &GOLDEN_FEATURES;
        let golden_z: &[f64] = &GOLDEN_PROJECTION;
        for (a, b) in f.data().iter().zip(golden_f) {
            assert!((a - b).abs() < 1e-12, "features {:?}", f.data());
        }
        for (a, b) in z.data().iter().zip(golden_z) {
            assert!((a - b).abs() < 1e-12, "projection {:?}", z.data());
        }
    }

    const GOLDEN_FEATURES: [f64; 6] = [
        0.057615257277599474,
        0.0,
        0.30822189760095015,
        0.0,
        0.24248818634875946,
        0.0,
    ];
    const GOLDEN_PROJECTION: [f64; 3] = [
        -0.19503014052185652,
        0.23423125859494814,
        -0.08249628873540468,
    ];

    #[test]
    fn ema_single_step() {
        let mut student = ComposedModel::zeros(cfg()).unwrap();
        let mut teacher = student.clone();
        for (_, t) in teacher.params_mut().iter_mut() {
            t.data_mut().fill(1.0);
        }
        student.params_mut().get_mut(H_B).unwrap().data_mut()[0] = 0.0;
        let mut pair = StudentTeacherPair::from_parts(student.clone(), teacher, 0.999).unwrap();
        pair.ema_update().unwrap();
        assert!(pair
            .teacher()
            .params()
            .iter()
            .all(|(_, t)| t.data().iter().all(|&v| (v - 0.999).abs() < 1e-15)));
        assert_eq!(pair.student(), &student);
    }

    #[test]
    fn ema_fixed_point() {
        let mut pair = StudentTeacherPair::new(model(7), 0.9).unwrap();
        let before = pair.teacher().clone();
        pair.ema_update().unwrap();
        assert_eq!(pair.teacher(), &before);
    }

    #[test]
    fn ema_structure_mismatch() {
        let other = NetworkConfig {
            feature_dim: 7,
            ..cfg()
        };
        let a = ComposedModel::zeros(cfg()).unwrap();
        let b = ComposedModel::zeros(other).unwrap();
        assert!(matches!(
            StudentTeacherPair::from_parts(a, b, 0.5),
            Err(Error::Structure(_))
        ));
    }

    #[test]
    fn ema_step_is_bounded_by_student_step() {
        let mut pair = StudentTeacherPair::new(model(8), 0.99).unwrap();
        let eps = 0.37;
        let before = pair.teacher().clone();
        for (_, t) in pair.student_mut().params_mut().iter_mut() {
            for v in t.data_mut() {
                *v += eps;
            }
        }
        pair.ema_update().unwrap();
        for ((_, a), (_, b)) in pair.teacher().params().iter().zip(before.params().iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= (1.0 - 0.99) * eps + 1e-15);
            }
        }
    }

    #[test]
    fn reinit_projection_keeps_backbone() {
        let mut m = model(9);
        let before = m.clone();
        m.reinit_projection(&mut ChaCha8Rng::seed_from_u64(100));
        for (name, t) in m.params().iter() {
            let same = t == before.params().get(name).unwrap();
            assert_eq!(same, !name.starts_with("proj."), "{name}");
        }
    }
}
