//! Dense feed-forward inference in `f32`, plus top-1 evaluation under
//! weight faults.
//!
//! Storage formats only affect how weights are written and read back; all
//! arithmetic runs in binary32. Matrix products accumulate sequentially over
//! the input dimension so logits are bit-stable across runs and platforms.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::DataTypeSpec;
use crate::error::{Error, Result};
use crate::fault::{FaultConfig, MaskSampler};
use crate::guard::{protect_shaped, LayerGuard, OutlierMode, StoredLayer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::None => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `[out, in]`, row-major.
    pub weights: Tensor,
    pub bias: Option<Vec<f32>>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Tensor, bias: Option<Vec<f32>>, activation: Activation) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "dense weights must be 2-d, got {:?}",
                weights.shape()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != weights.rows() {
                return Err(Error::ShapeMismatch(format!(
                    "bias has {} entries for {} outputs",
                    b.len(),
                    weights.rows()
                )));
            }
        }
        Ok(DenseLayer {
            weights,
            bias,
            activation,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_features(&self) -> usize {
        self.weights.rows()
    }

    fn forward_with(&self, weights: &[f32], bias: Option<&[f32]>, input: &Tensor) -> Tensor {
        let (n_in, n_out) = (self.in_features(), self.out_features());
        let batch = input.rows();
        // Input-major copy so the inner loop runs over outputs. Each output
        // still sums its products in input order.
        let mut wt = vec![0.0f32; n_in * n_out];
        for o in 0..n_out {
            for k in 0..n_in {
                wt[k * n_out + o] = weights[o * n_in + k];
            }
        }
        let mut out = vec![0.0f32; batch * n_out];
        for (x, acc) in input.data.chunks_exact(n_in).zip(out.chunks_exact_mut(n_out)) {
            for (&xk, col) in x.iter().zip(wt.chunks_exact(n_out)) {
                for (a, &w) in acc.iter_mut().zip(col) {
                    *a += w * xk;
                }
            }
            if let Some(bias) = bias {
                for (a, &b) in acc.iter_mut().zip(bias) {
                    *a += b;
                }
            }
            for a in acc.iter_mut() {
                *a = self.activation.apply(*a);
            }
        }
        Tensor {
            shape: vec![batch, n_out],
            data: out,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub layers: Vec<DenseLayer>,
    pub guards: Option<Vec<LayerGuard>>,
}

impl Model {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::ShapeMismatch("model has no layers".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_features() != pair[1].in_features() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} emits {} features, layer {} expects {}",
                    pair[0].out_features(),
                    i + 1,
                    pair[1].in_features()
                )));
            }
        }
        if layers.last().map(|l| l.activation) != Some(Activation::None) {
            return Err(Error::ShapeMismatch(
                "final layer must be linear (logits)".into(),
            ));
        }
        Ok(Model {
            layers,
            guards: None,
        })
    }

    pub fn in_features(&self) -> usize {
        self.layers[0].in_features()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_features())
    }

    /// Total number of weights `n`, biases excluded.
    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.data().len()).sum()
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape().len() != 2 || input.cols() != self.in_features() {
            return Err(Error::ShapeMismatch(format!(
                "input {:?} does not match {} features",
                input.shape(),
                self.in_features()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecMode {
    /// Weights used as stored, no scaling.
    Baseline,
    /// Every weight divided by its layer constant after readout.
    RescaledWeights,
    /// Scaled weights used directly; only the logits are divided.
    LogitDivision,
}

/// Affine + activation composition over a `[batch, in]` input.
pub fn forward(model: &Model, input: &Tensor) -> Result<Tensor> {
    model.check_input(input)?;
    let mut x = input.clone();
    for layer in &model.layers {
        x = layer.forward_with(layer.weights.data(), layer.bias.as_deref(), &x);
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitDivisionOutput {
    pub logits: Tensor,
    /// `classes * batch`.
    pub division_count: usize,
}

/// Runs a model whose weights are stored at scale `c_i` and whose biases are
/// pre-multiplied by the running product `c_1 ... c_i`, then divides the
/// logits by the full product.
///
/// Exact in real arithmetic because ReLU is positively homogeneous.
pub fn forward_logit_division(
    scaled: &Model,
    constants: &[f32],
    input: &Tensor,
) -> Result<LogitDivisionOutput> {
    check_homogeneous(scaled, constants)?;
    let logits = forward(scaled, input)?;
    let product = cumulative_products(constants).last().copied().unwrap_or(1.0);
    let batch = logits.rows();
    let data = logits
        .data
        .iter()
        .map(|&v| (v as f64 / product) as f32)
        .collect();
    Ok(LogitDivisionOutput {
        logits: Tensor {
            shape: logits.shape,
            data,
        },
        division_count: scaled.classes() * batch,
    })
}

fn check_homogeneous(model: &Model, constants: &[f32]) -> Result<()> {
    if constants.len() != model.layers.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} constants for {} layers",
            constants.len(),
            model.layers.len()
        )));
    }
    if let Some(i) = constants.iter().position(|&c| !(c > 0.0)) {
        return Err(Error::InvalidConfig(format!(
            "constant {i} must be positive, got {}",
            constants[i]
        )));
    }
    let hidden = &model.layers[..model.layers.len() - 1];
    if let Some(i) = hidden.iter().position(|l| l.activation != Activation::Relu) {
        return Err(Error::NotPositivelyHomogeneous(i));
    }
    Ok(())
}

fn cumulative_products(constants: &[f32]) -> Vec<f64> {
    constants
        .iter()
        .scan(1.0f64, |acc, &c| {
            *acc *= c as f64;
            Some(*acc)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasScaling {
    /// Bias of layer `i` multiplied by `c_1 ... c_i`.
    #[default]
    Cumulative,
    /// Biases dropped.
    NoBias,
}

/// Fault-free scaled copy of `model` for [`forward_logit_division`].
pub fn scale_for_logit_division(model: &Model, constants: &[f32], bias: BiasScaling) -> Result<Model> {
    check_homogeneous(model, constants)?;
    let products = cumulative_products(constants);
    let layers = model
        .layers
        .iter()
        .zip(constants)
        .zip(&products)
        .map(|((layer, &c), &p)| DenseLayer {
            weights: Tensor {
                shape: layer.weights.shape.clone(),
                data: layer.weights.data.iter().map(|&w| (c as f64 * w as f64) as f32).collect(),
            },
            bias: match bias {
                BiasScaling::NoBias => None,
                BiasScaling::Cumulative => layer
                    .bias
                    .as_ref()
                    .map(|b| b.iter().map(|&v| (v as f64 * p) as f32).collect()),
            },
            activation: layer.activation,
        })
        .collect();
    Ok(Model {
        layers,
        guards: None,
    })
}

/// Index of the largest logit; NaN never wins, ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    let mut best_v = f32::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Percentage of rows whose argmax equals the label.
pub fn top1_accuracy(logits: &Tensor, labels: &[u32]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = (0..logits.rows())
        .filter(|&r| argmax(logits.row(r)) == labels[r] as usize)
        .count();
    100.0 * correct as f64 / labels.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<u32>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<u32>, classes: usize) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for features {:?}",
                labels.len(),
                features.shape()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::ShapeMismatch(format!("label {l} >= {classes} classes")));
        }
        Ok(Dataset {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Everything needed to inject faults into a model's stored weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FaultPlan {
    pub spec: DataTypeSpec,
    pub fault: FaultConfig,
    /// One guard per layer.
    pub guards: Vec<LayerGuard>,
    pub mode: ExecMode,
    /// Also store (and fault) biases in the target format.
    pub inject_bias: bool,
    pub bias_scaling: BiasScaling,
}

impl FaultPlan {
    /// Unit constants on every layer: the unprotected reference.
    pub fn baseline(model: &Model, spec: DataTypeSpec, fault: FaultConfig) -> Self {
        FaultPlan {
            spec,
            fault,
            guards: (0..model.layers.len())
                .map(|i| LayerGuard::baseline(i, spec))
                .collect(),
            mode: ExecMode::Baseline,
            inject_bias: false,
            bias_scaling: BiasScaling::Cumulative,
        }
    }

    /// `c_i = t / max|W_i|` on every layer.
    pub fn scaled(model: &Model, spec: DataTypeSpec, fault: FaultConfig, t: f64, mode: ExecMode) -> Result<Self> {
        let guards = model
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                // Outlier-free layers keep their full weight list; clamping would
                // change the model, so it is rejected here.
                let (guard, exposed) = LayerGuard::optimal(i, l.weights.data(), t, spec, OutlierMode::Clamp)?;
                if exposed.len() != l.weights.data().len() || !guard.outliers.is_empty() {
                    return Err(Error::InvalidConfig(format!(
                        "layer {i} has weights outside (-2, 2); build guards explicitly"
                    )));
                }
                Ok(guard)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FaultPlan {
            spec,
            fault,
            guards,
            mode,
            inject_bias: false,
            bias_scaling: BiasScaling::Cumulative,
        })
    }

    pub fn constants(&self) -> Vec<f32> {
        self.guards.iter().map(|g| g.constant).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Mean top-1 over rounds, in percent.
    pub top1_accuracy: f64,
    pub rounds: u32,
    pub mean: f64,
    /// Sample standard deviation over rounds (0 for a single round).
    pub std: f64,
    /// Divisions performed per round by the execution mode.
    pub division_count: usize,
    pub per_round: Vec<f64>,
}

struct PreparedLayer {
    stored: StoredLayer,
    bias: Option<StoredLayer>,
    plain_bias: Option<Vec<f32>>,
}

fn prepare(model: &Model, plan: &FaultPlan) -> Result<Vec<PreparedLayer>> {
    if plan.guards.len() != model.layers.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} guards for {} layers",
            plan.guards.len(),
            model.layers.len()
        )));
    }
    let constants = plan.constants();
    if plan.mode == ExecMode::LogitDivision {
        check_homogeneous(model, &constants)?;
    }
    let products = cumulative_products(&constants);
    model
        .layers
        .iter()
        .zip(&plan.guards)
        .zip(&products)
        .map(|((layer, guard), &product)| {
            let stored = protect_shaped(layer.weights.data(), layer.weights.shape().to_vec(), guard)?;
            let bias_values = match (plan.mode, plan.bias_scaling, &layer.bias) {
                (_, _, None) => None,
                (ExecMode::LogitDivision, BiasScaling::NoBias, _) => None,
                (ExecMode::LogitDivision, BiasScaling::Cumulative, Some(b)) => {
                    Some(b.iter().map(|&v| (v as f64 * product) as f32).collect::<Vec<_>>())
                }
                (_, _, Some(b)) => Some(b.clone()),
            };
            let (bias, plain_bias) = match bias_values {
                Some(b) if plan.inject_bias => {
                    let g = LayerGuard::baseline(guard.layer_index, plan.spec);
                    (Some(protect_shaped(&b, vec![b.len()], &g)?), None)
                }
                other => (None, other),
            };
            Ok(PreparedLayer {
                stored,
                bias,
                plain_bias,
            })
        })
        .collect()
}

fn run_round(
    model: &Model,
    prepared: &[PreparedLayer],
    plan: &FaultPlan,
    dataset: &Dataset,
    round: u32,
) -> Result<f64> {
    let mut sampler = MaskSampler::new(&plan.spec, &plan.fault, round as u64)?;
    let mut x = dataset.features.clone();
    for (layer, prep) in model.layers.iter().zip(prepared) {
        let raw = prep.stored.read_scaled(|| sampler.next_raw());
        let weights: Vec<f32> = match plan.mode {
            ExecMode::LogitDivision => prep.stored.finish_scaled(raw),
            ExecMode::Baseline | ExecMode::RescaledWeights => prep.stored.finish_recover(raw),
        }
        .into_iter()
        .map(|v| v as f32)
        .collect();
        let bias: Option<Vec<f32>> = match (&prep.bias, &prep.plain_bias) {
            (Some(stored), _) => Some(
                stored
                    .read_scaled(|| sampler.next_raw())
                    .into_iter()
                    .map(|v| v as f32)
                    .collect(),
            ),
            (None, plain) => plain.clone(),
        };
        x = layer.forward_with(&weights, bias.as_deref(), &x);
    }
    if plan.mode == ExecMode::LogitDivision {
        let product = cumulative_products(&plan.constants()).last().copied().unwrap_or(1.0);
        for v in x.data_mut() {
            *v = (*v as f64 / product) as f32;
        }
    }
    Ok(top1_accuracy(&x, &dataset.labels))
}

/// Top-1 accuracy over `rounds` independent fault realizations.
///
/// Round `r` draws its masks from substream `r` of the plan's seed, so
/// plans that share a seed see the same flip positions and results do not
/// depend on scheduling.
pub fn evaluate_top1(model: &Model, dataset: &Dataset, plan: &FaultPlan, rounds: u32) -> Result<EvalResult> {
    if rounds == 0 {
        return Err(Error::InvalidConfig("rounds must be at least 1".into()));
    }
    plan.fault.validate()?;
    model.check_input(&dataset.features)?;
    let prepared = prepare(model, plan)?;
    let per_round = (0..rounds)
        .into_par_iter()
        .map(|r| run_round(model, &prepared, plan, dataset, r))
        .collect::<Result<Vec<_>>>()?;
    let mean = per_round.iter().sum::<f64>() / rounds as f64;
    let std = if rounds > 1 {
        let ss: f64 = per_round.iter().map(|a| (a - mean).powi(2)).sum();
        (ss / (rounds - 1) as f64).sqrt()
    } else {
        0.0
    };
    let division_count = match plan.mode {
        ExecMode::Baseline => 0,
        ExecMode::RescaledWeights => model.weight_count(),
        ExecMode::LogitDivision => model.classes() * dataset.len(),
    };
    Ok(EvalResult {
        top1_accuracy: mean,
        rounds,
        mean,
        std,
        division_count,
        per_round,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fault::Protection;

    fn layer(out: usize, inp: usize, w: Vec<f32>, b: Option<Vec<f32>>, act: Activation) -> DenseLayer {
        DenseLayer::new(Tensor::new(vec![out, inp], w).unwrap(), b, act).unwrap()
    }

    fn golden_model() -> Model {
        Model::new(vec![
            layer(3, 2, vec![0.5, -1.0, 0.25, 0.75, -0.5, 0.125], Some(vec![0.1, -0.2, 0.0]), Activation::Relu),
            layer(2, 3, vec![1.0, -0.5, 0.25, -0.75, 0.5, 1.5], Some(vec![0.05, -0.05]), Activation::None),
        ])
        .unwrap()
    }

    #[test]
    fn identity_model() {
        let m = Model::new(vec![layer(2, 2, vec![1.0, 0.0, 0.0, 1.0], None, Activation::None)]).unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.3, -7.5]).unwrap();
        assert_eq!(forward(&m, &x).unwrap().data(), &[0.3, -7.5]);
    }

    #[test]
    fn golden_logits() {
        // Hand evaluation:
        // x = [1, 2]: h = relu([0.5-2+0.1, 0.25+1.5-0.2, -0.5+0.25]) = [0, 1.55, 0]
        // logits = [-0.5*1.55 + 0.05, 0.5*1.55 - 0.05] = [-0.725, 0.725]
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let y = forward(&golden_model(), &x).unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        assert!((y.data()[0] + 0.725).abs() < 1e-6);
        assert!((y.data()[1] - 0.725).abs() < 1e-6);
    }

    #[test]
    fn shape_errors() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        let relu_last = Model::new(vec![layer(1, 1, vec![1.0], None, Activation::Relu)]);
        assert!(relu_last.is_err());
        let bad = Model::new(vec![
            layer(3, 2, vec![0.0; 6], None, Activation::Relu),
            layer(1, 2, vec![0.0; 2], None, Activation::None),
        ]);
        assert!(matches!(bad, Err(Error::ShapeMismatch(_))));
        let x = Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap();
        assert!(forward(&golden_model(), &x).is_err());
    }

    #[test]
    fn logit_division_unit_constants_and_count() {
        let m = golden_model();
        let x = Tensor::new(vec![4, 2], vec![1.0, 2.0, -1.0, 0.5, 0.3, 0.3, 2.0, -2.0]).unwrap();
        let base = forward(&m, &x).unwrap();
        let scaled = scale_for_logit_division(&m, &[1.0, 1.0], BiasScaling::Cumulative).unwrap();
        let out = forward_logit_division(&scaled, &[1.0, 1.0], &x).unwrap();
        assert_eq!(out.logits, base);
        assert_eq!(out.division_count, 2 * 4);
    }

    #[test]
    fn logit_division_no_bias_two_layers() {
        let m = Model::new(vec![
            layer(3, 2, vec![0.5, -1.0, 0.25, 0.75, -0.5, 0.125], None, Activation::Relu),
            layer(2, 3, vec![1.0, -0.5, 0.25, -0.75, 0.5, 1.5], None, Activation::None),
        ])
        .unwrap();
        let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, -0.7, 0.1]).unwrap();
        let base = forward(&m, &x).unwrap();
        let c = [2.0, 3.0];
        let out = forward_logit_division(&scale_for_logit_division(&m, &c, BiasScaling::NoBias).unwrap(), &c, &x).unwrap();
        for (a, b) in out.logits.data().iter().zip(base.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-6), "{a} vs {b}");
        }
    }

    #[test]
    fn logit_division_requires_relu() {
        let m = Model::new(vec![
            layer(1, 1, vec![1.0], None, Activation::None),
            layer(1, 1, vec![1.0], None, Activation::None),
        ])
        .unwrap();
        let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        assert!(matches!(
            forward_logit_division(&m, &[1.0, 1.0], &x),
            Err(Error::NotPositivelyHomogeneous(0))
        ));
    }

    #[test]
    fn relu_positive_homogeneity() {
        for &x in &[-3.0f32, -0.0, 0.0, 1e-30, 0.5, 7.25] {
            for &a in &[0.5f32, 2.0, 3.0] {
                assert_eq!(Activation::Relu.apply(a * x), a * Activation::Relu.apply(x));
            }
        }
    }

    fn tiny_dataset() -> Dataset {
        let x = Tensor::new(vec![4, 2], vec![1.0, 2.0, -1.0, 0.5, 0.3, 0.3, 2.0, -2.0]).unwrap();
        let labels = argmax_labels(&forward(&golden_model(), &x).unwrap());
        Dataset::new(x, labels, 2).unwrap()
    }

    fn argmax_labels(t: &Tensor) -> Vec<u32> {
        (0..t.rows()).map(|r| argmax(t.row(r)) as u32).collect()
    }

    #[test]
    fn zero_ber_matches_clean_accuracy() {
        let m = golden_model();
        let d = tiny_dataset();
        let cfg = FaultConfig::new(0.0, Protection::ExponentMsb, 3, 4).unwrap();
        for mode in [ExecMode::RescaledWeights, ExecMode::LogitDivision] {
            let plan = FaultPlan::scaled(&m, DataTypeSpec::FP32, cfg, 1.9999, mode).unwrap();
            let r = evaluate_top1(&m, &d, &plan, 4).unwrap();
            assert_eq!(r.mean, 100.0);
            assert_eq!(r.std, 0.0);
        }
        let plan = FaultPlan::baseline(&m, DataTypeSpec::FP32, cfg);
        let r = evaluate_top1(&m, &d, &plan, 3).unwrap();
        assert_eq!((r.mean, r.std, r.division_count), (100.0, 0.0, 0));
    }

    #[test]
    fn division_counts() {
        let m = golden_model();
        let d = tiny_dataset();
        let cfg = FaultConfig::new(0.0, Protection::ExponentMsb, 3, 1).unwrap();
        let plan = FaultPlan::scaled(&m, DataTypeSpec::FP32, cfg, 1.9999, ExecMode::RescaledWeights).unwrap();
        assert_eq!(evaluate_top1(&m, &d, &plan, 1).unwrap().division_count, 12);
        let plan = FaultPlan { mode: ExecMode::LogitDivision, ..plan };
        assert_eq!(evaluate_top1(&m, &d, &plan, 1).unwrap().division_count, 8);
    }

    #[test]
    fn single_sample_accuracy_is_binary() {
        let m = golden_model();
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let d = Dataset::new(x, vec![1], 2).unwrap();
        let cfg = FaultConfig::new(0.3, Protection::None, 8, 1).unwrap();
        let plan = FaultPlan::baseline(&m, DataTypeSpec::QFIXED, cfg);
        let r = evaluate_top1(&m, &d, &plan, 1).unwrap();
        assert!(r.mean == 0.0 || r.mean == 100.0);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let m = golden_model();
        let d = tiny_dataset();
        let cfg = FaultConfig::new(0.05, Protection::None, 21, 6).unwrap();
        let mut plan = FaultPlan::scaled(&m, DataTypeSpec::QFIXED, cfg, 1.97, ExecMode::RescaledWeights).unwrap();
        plan.inject_bias = true;
        let a = evaluate_top1(&m, &d, &plan, 6).unwrap();
        let b = evaluate_top1(&m, &d, &plan, 6).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn argmax_ignores_nan() {
        assert_eq!(argmax(&[f32::NAN, 1.0, 3.0, 3.0]), 2);
        assert_eq!(argmax(&[f32::NAN, f32::NAN]), 0);
    }
}
