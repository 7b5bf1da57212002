//! Backbones (tiny MLP and tiny ConvNet) and the linear classifier.
//!
//! The backbone maps `x: (batch, in_dims)` to a feature map
//! `F: (batch, d, h_F, w_F)`; global average pooling gives the representation
//! `f: (batch, d)`; the classifier computes logits `z = f Wᵀ (+ b)` with one
//! weight row per class.

use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::rng;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

pub const CLASSIFIER_WEIGHT: &str = "classifier.weight";
pub const CLASSIFIER_BIAS: &str = "classifier.bias";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneSpec {
    /// Dense layers `in_dims -> hidden.. -> feature_dim`, each followed by ReLU.
    /// The feature map is `(d, 1, 1)`.
    Mlp {
        in_dims: usize,
        hidden: Vec<usize>,
        feature_dim: usize,
    },
    /// Two 3×3 same-padded conv layers, each followed by ReLU and 2×2 max
    /// pooling. Input rows are `in_channels × height × width` images.
    TinyConv {
        in_channels: usize,
        height: usize,
        width: usize,
        hidden_channels: usize,
        feature_dim: usize,
    },
}

impl BackboneSpec {
    pub fn in_dims(&self) -> usize {
        match self {
            BackboneSpec::Mlp { in_dims, .. } => *in_dims,
            BackboneSpec::TinyConv {
                in_channels,
                height,
                width,
                ..
            } => in_channels * height * width,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            BackboneSpec::Mlp { feature_dim, .. } | BackboneSpec::TinyConv { feature_dim, .. } => {
                *feature_dim
            }
        }
    }

    /// Spatial extent `(h_F, w_F)` of the final feature map.
    pub fn spatial(&self) -> (usize, usize) {
        match self {
            BackboneSpec::Mlp { .. } => (1, 1),
            BackboneSpec::TinyConv { height, width, .. } => (height / 4, width / 4),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim() == 0 {
            return Err(Error::invalid("backbone.feature_dim", "must be at least 1"));
        }
        match self {
            BackboneSpec::Mlp {
                in_dims, hidden, ..
            } => {
                if *in_dims == 0 {
                    return Err(Error::invalid("backbone.in_dims", "must be at least 1"));
                }
                if hidden.contains(&0) {
                    return Err(Error::invalid(
                        "backbone.hidden",
                        "layer widths must be positive",
                    ));
                }
            }
            BackboneSpec::TinyConv {
                in_channels,
                height,
                width,
                hidden_channels,
                ..
            } => {
                if *in_channels == 0 || *hidden_channels == 0 {
                    return Err(Error::invalid("backbone.channels", "must be at least 1"));
                }
                if *height < 4 || *width < 4 {
                    return Err(Error::invalid(
                        "backbone.height/width",
                        "two 2x2 poolings need an input of at least 4x4",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Parameter names and shapes in construction order.
    fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        // (name, shape, fan_in); fan_in == 0 marks a bias.
        match self {
            BackboneSpec::Mlp {
                in_dims,
                hidden,
                feature_dim,
            } => {
                let mut dims = vec![*in_dims];
                dims.extend(hidden);
                dims.push(*feature_dim);
                let mut out = Vec::new();
                for (i, pair) in dims.windows(2).enumerate() {
                    out.push((
                        format!("backbone.fc{i}.weight"),
                        vec![pair[1], pair[0]],
                        pair[0],
                    ));
                    out.push((format!("backbone.fc{i}.bias"), vec![pair[1]], 0));
                }
                out
            }
            BackboneSpec::TinyConv {
                in_channels,
                hidden_channels,
                feature_dim,
                ..
            } => vec![
                (
                    "backbone.conv1.weight".into(),
                    vec![*hidden_channels, *in_channels, 3, 3],
                    in_channels * 9,
                ),
                ("backbone.conv1.bias".into(), vec![*hidden_channels], 0),
                (
                    "backbone.conv2.weight".into(),
                    vec![*feature_dim, *hidden_channels, 3, 3],
                    hidden_channels * 9,
                ),
                ("backbone.conv2.bias".into(), vec![*feature_dim], 0),
            ],
        }
    }
}

/// Backbone parameters plus classifier parameters.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub spec: BackboneSpec,
    pub classes: usize,
    pub backbone: ParameterSet,
    pub classifier: ParameterSet,
}

/// Tape handles for one backbone pass.
#[derive(Debug, Clone, Copy)]
pub struct FeatureVars {
    pub feature_map: Var,
    pub pooled: Var,
}

fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut rng::Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    if fan_in == 0 {
        return Tensor::zeros(shape);
    }
    let limit = (6.0 / fan_in as f32).sqrt();
    let dist = Uniform::new(-limit, limit).expect("finite positive limit");
    let data = (0..numel).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("numel matches")
}

impl ModelState {
    /// He-uniform weights (`U(-√(6/fan_in), √(6/fan_in))`), zero biases.
    pub fn init(
        spec: BackboneSpec,
        classes: usize,
        classifier_bias: bool,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        if classes < 1 {
            return Err(Error::invalid("classes", "must be at least 1"));
        }
        let mut r = rng::stream(seed, "init.backbone", 0);
        let mut backbone = ParameterSet::new();
        for (name, shape, fan_in) in spec.layout() {
            backbone.insert(name, he_uniform(&shape, fan_in, &mut r));
        }
        let mut model = Self {
            classifier: ParameterSet::new(),
            spec,
            classes,
            backbone,
        };
        model.init_classifier(classifier_bias, seed);
        Ok(model)
    }

    /// Fresh classifier weights drawn from the `init.classifier` stream.
    pub fn init_classifier(&mut self, bias: bool, seed: u64) {
        let d = self.spec.feature_dim();
        let mut r = rng::stream(seed, "init.classifier", 0);
        let mut classifier = ParameterSet::new();
        classifier.insert(CLASSIFIER_WEIGHT, he_uniform(&[self.classes, d], d, &mut r));
        if bias {
            classifier.insert(CLASSIFIER_BIAS, Tensor::zeros(&[self.classes]));
        }
        self.classifier = classifier;
    }

    pub fn has_classifier_bias(&self) -> bool {
        self.classifier.contains(CLASSIFIER_BIAS)
    }

    fn bind(tape: &mut Tape, set: &ParameterSet, name: &str) -> Var {
        let p = set.get(name).expect("layout parameter present");
        tape.param(name, p.value.clone(), p.trainable)
    }

    /// Records the backbone on `tape`. Parameters are bound with
    /// `requires_grad` equal to their trainable flag.
    pub fn forward_features(&self, tape: &mut Tape, x: Var) -> Result<FeatureVars> {
        let xv = tape.value(x);
        let in_dims = self.spec.in_dims();
        if xv.rank() != 2 || xv.dim(1) != in_dims {
            let batch = xv.shape().first().copied().unwrap_or(0);
            return Err(Error::shape(
                "backbone input",
                &[batch, in_dims],
                xv.shape(),
            ));
        }
        let batch = xv.dim(0);
        let feature_map = match &self.spec {
            BackboneSpec::Mlp { hidden, .. } => {
                let mut h = x;
                for i in 0..=hidden.len() {
                    let w = Self::bind(tape, &self.backbone, &format!("backbone.fc{i}.weight"));
                    let b = Self::bind(tape, &self.backbone, &format!("backbone.fc{i}.bias"));
                    let lin = tape.linear(h, w, Some(b))?;
                    h = tape.relu(lin);
                }
                tape.reshape(h, &[batch, self.spec.feature_dim(), 1, 1])?
            }
            BackboneSpec::TinyConv {
                in_channels,
                height,
                width,
                ..
            } => {
                let img = tape.reshape(x, &[batch, *in_channels, *height, *width])?;
                let mut h = img;
                for layer in ["conv1", "conv2"] {
                    let w = Self::bind(tape, &self.backbone, &format!("backbone.{layer}.weight"));
                    let b = Self::bind(tape, &self.backbone, &format!("backbone.{layer}.bias"));
                    let c = tape.conv2d(h, w, Some(b), 1)?;
                    let a = tape.relu(c);
                    h = tape.max_pool2(a)?;
                }
                h
            }
        };
        let pooled = tape.global_avg_pool(feature_map)?;
        Ok(FeatureVars {
            feature_map,
            pooled,
        })
    }

    /// Records the linear classifier on `tape`.
    pub fn forward_logits(&self, tape: &mut Tape, f: Var) -> Result<Var> {
        let d = self.spec.feature_dim();
        let fv = tape.value(f);
        if fv.rank() != 2 || fv.dim(1) != d {
            let batch = fv.shape().first().copied().unwrap_or(0);
            return Err(Error::shape("classifier input", &[batch, d], fv.shape()));
        }
        let w = Self::bind(tape, &self.classifier, CLASSIFIER_WEIGHT);
        let b = self
            .has_classifier_bias()
            .then(|| Self::bind(tape, &self.classifier, CLASSIFIER_BIAS));
        tape.linear(f, w, b)
    }

    /// Adds tape gradients into the accumulators of every trainable parameter.
    pub fn accumulate_grads(&mut self, tape: &Tape, grads: &Gradients) -> Result<()> {
        for (var, name) in tape.params() {
            let Some(g) = grads.get(var) else { continue };
            let set = if name.starts_with("backbone.") {
                &mut self.backbone
            } else {
                &mut self.classifier
            };
            set.accumulate(name, g)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.backbone.zero_grad();
        self.classifier.zero_grad();
    }

    /// Every parameter as `(name, value)`, backbone first.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.backbone
            .iter()
            .chain(self.classifier.iter())
            .map(|(n, p)| (n.to_string(), p.value.clone()))
            .collect()
    }

    /// Rebuilds a model from stored tensors. Every backbone tensor named by the
    /// spec and `classifier.weight` must be present with the expected shape.
    pub fn from_named(spec: BackboneSpec, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        spec.validate()?;
        let mut backbone = ParameterSet::new();
        let mut classifier = ParameterSet::new();
        for (name, t) in tensors {
            if name.starts_with("backbone.") {
                backbone.insert(name, t);
            } else if name == CLASSIFIER_WEIGHT || name == CLASSIFIER_BIAS {
                classifier.insert(name, t);
            } else {
                return Err(Error::invalid(
                    "checkpoint",
                    format!("unexpected tensor {name}"),
                ));
            }
        }
        for (name, shape, _) in spec.layout() {
            let p = backbone
                .get(&name)
                .ok_or_else(|| Error::invalid("checkpoint", format!("missing tensor {name}")))?;
            p.value.ensure_shape(&name, &shape)?;
        }
        if backbone.len() != spec.layout().len() {
            return Err(Error::invalid(
                "checkpoint",
                "backbone tensors do not match the spec",
            ));
        }
        let w = classifier
            .get(CLASSIFIER_WEIGHT)
            .ok_or_else(|| Error::invalid("checkpoint", "missing classifier.weight"))?;
        let (classes, d) = match w.value.shape() {
            [c, d] => (*c, *d),
            other => {
                return Err(Error::shape(
                    CLASSIFIER_WEIGHT,
                    &[0, spec.feature_dim()],
                    other,
                ))
            }
        };
        if d != spec.feature_dim() {
            return Err(Error::shape(
                CLASSIFIER_WEIGHT,
                &[classes, spec.feature_dim()],
                &[classes, d],
            ));
        }
        if let Some(b) = classifier.get(CLASSIFIER_BIAS) {
            b.value.ensure_shape(CLASSIFIER_BIAS, &[classes])?;
        }
        Ok(Self {
            spec,
            classes,
            backbone,
            classifier,
        })
    }
}

/// Feature map `F` and pooled representation `f` for a batch of inputs.
pub fn backbone_forward(model: &ModelState, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let vars = model.forward_features(&mut tape, xv)?;
    Ok((
        tape.value(vars.feature_map).clone(),
        tape.value(vars.pooled).clone(),
    ))
}

/// Logits `z = f Wᵀ (+ b)`.
pub fn classifier_forward(model: &ModelState, f: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let fv = tape.input(f.clone());
    let z = model.forward_logits(&mut tape, fv)?;
    Ok(tape.value(z).clone())
}

/// Logits for raw inputs, evaluated in chunks to bound tape memory.
pub fn predict_logits(model: &ModelState, x: &Tensor) -> Result<Tensor> {
    const CHUNK: usize = 512;
    let n = x.dim(0);
    let mut data = Vec::with_capacity(n * model.classes);
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let (_, f) = backbone_forward(model, &x.select_rows(&idx))?;
        data.extend_from_slice(classifier_forward(model, &f)?.data());
    }
    Tensor::new(vec![n, model.classes], data)
}

/// Pooled features for raw inputs, evaluated in chunks.
pub fn pooled_features(model: &ModelState, x: &Tensor) -> Result<Tensor> {
    const CHUNK: usize = 512;
    let n = x.dim(0);
    let d = model.spec.feature_dim();
    let mut data = Vec::with_capacity(n * d);
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let (_, f) = backbone_forward(model, &x.select_rows(&idx))?;
        data.extend_from_slice(f.data());
    }
    Tensor::new(vec![n, d], data)
}
