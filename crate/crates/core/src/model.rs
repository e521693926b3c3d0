//! `Network` (head or two-layer), the `Classifier` trait, and the JSON
//! model file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::gmm::from_f64s;
use crate::net::{argmax, Batch, Linear, SoftmaxHead, TwoLayerNet};
use crate::scalar::Scalar;

pub const MODEL_FORMAT: &str = "lsne-model";
pub const MODEL_VERSION: u32 = 1;

/// Anything that maps a feature vector to one of its labels.
pub trait Classifier<F: Scalar>: Sync {
    fn classify(&self, v: &[F]) -> Result<&str>;

    /// Every label `classify` can return, without duplicates.
    fn class_labels(&self) -> Vec<String>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum Network<F> {
    Head(SoftmaxHead<F>),
    TwoLayer(TwoLayerNet<F>),
}

impl<F: Scalar> Network<F> {
    pub fn labels(&self) -> &[String] {
        match self {
            Network::Head(h) => h.labels(),
            Network::TwoLayer(n) => n.labels(),
        }
    }

    pub fn input_dims(&self) -> usize {
        match self {
            Network::Head(h) => h.in_dims(),
            Network::TwoLayer(n) => n.input_dims(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Network::Head(_) => "head",
            Network::TwoLayer(_) => "two-layer",
        }
    }

    pub fn logits(&self, v: &[F]) -> Result<Vec<F>> {
        match self {
            Network::Head(h) => h.logits(v),
            Network::TwoLayer(n) => n.logits(v),
        }
    }

    pub fn loss(&self, batch: &Batch<F>) -> Result<F> {
        match self {
            Network::Head(h) => h.loss(batch),
            Network::TwoLayer(n) => n.loss(batch),
        }
    }

    pub fn trainable_count(&self) -> usize {
        match self {
            Network::Head(h) => h.trainable_count(),
            Network::TwoLayer(n) => n.trainable_count(),
        }
    }

    pub fn trainable_params(&self) -> Vec<F> {
        match self {
            Network::Head(h) => {
                let mut out = Vec::with_capacity(h.trainable_count());
                h.layer().gather_params(&mut out);
                out
            }
            Network::TwoLayer(n) => n.trainable_params(),
        }
    }

    pub fn set_trainable_params(&mut self, values: &[F]) {
        assert_eq!(values.len(), self.trainable_count(), "trainable parameter count");
        match self {
            Network::Head(h) => {
                h.layer_mut().scatter_params(values);
            }
            Network::TwoLayer(n) => n.set_trainable_params(values),
        }
    }

    /// Mean cross-entropy gradient over the trainable entries, in
    /// [`Network::trainable_params`] order.
    pub fn ce_grad_flat(&self, batch: &Batch<F>) -> Result<Vec<F>> {
        match self {
            Network::Head(h) => {
                let g = h.ce_grad(batch)?;
                let mut out = Vec::with_capacity(h.trainable_count());
                h.layer().gather_grad(&g, &mut out);
                Ok(out)
            }
            Network::TwoLayer(n) => Ok(n.flatten_grad(&n.ce_grad(batch)?)),
        }
    }

    pub fn to_json(&self) -> String {
        let file = match self {
            Network::Head(h) => head_file(h),
            Network::TwoLayer(n) => two_layer_file(n),
        };
        let mut out = serde_json::to_string(&file).expect("model serializes");
        out.push('\n');
        out
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        if file.format != MODEL_FORMAT {
            return Err(Error::Schema(format!("unexpected format `{}`", file.format)));
        }
        if file.version != MODEL_VERSION {
            return Err(Error::Schema(format!("unsupported version {}", file.version)));
        }
        match file.kind.as_str() {
            "head" => parse_head(file).map(Network::Head),
            "two-layer" => parse_two_layer(file).map(Network::TwoLayer),
            other => Err(Error::Schema(format!("unknown model kind `{other}`"))),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

impl<F: Scalar> Classifier<F> for Network<F> {
    fn classify(&self, v: &[F]) -> Result<&str> {
        let z = self.logits(v)?;
        Ok(&self.labels()[argmax(&z)])
    }

    fn class_labels(&self) -> Vec<String> {
        self.labels().to_vec()
    }
}

impl<F: Scalar> Classifier<F> for TwoLayerNet<F> {
    fn classify(&self, v: &[F]) -> Result<&str> {
        let z = self.logits(v)?;
        Ok(&self.labels()[argmax(&z)])
    }

    fn class_labels(&self) -> Vec<String> {
        self.labels().to_vec()
    }
}

impl<F: Scalar> Classifier<F> for SoftmaxHead<F> {
    fn classify(&self, v: &[F]) -> Result<&str> {
        let z = self.logits(v)?;
        Ok(&self.labels()[argmax(&z)])
    }

    fn class_labels(&self) -> Vec<String> {
        self.labels().to_vec()
    }
}

impl<F> From<SoftmaxHead<F>> for Network<F> {
    fn from(h: SoftmaxHead<F>) -> Self {
        Network::Head(h)
    }
}

impl<F> From<TwoLayerNet<F>> for Network<F> {
    fn from(n: TwoLayerNet<F>) -> Self {
        Network::TwoLayer(n)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    kind: String,
    labels: Vec<String>,
    dims: Value,
    weights: Value,
    frozen: Value,
}

#[derive(Serialize, Deserialize)]
struct HeadDims {
    input: usize,
    output: usize,
}

#[derive(Serialize, Deserialize)]
struct HeadWeights {
    rows: Vec<Vec<f64>>,
    bias: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct HeadFrozen {
    rows: usize,
}

#[derive(Serialize, Deserialize)]
struct TwoLayerDims {
    input: usize,
    hidden: usize,
    output: usize,
    /// Leading hidden units read by each FC2 row.
    fc2_row_width: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct TwoLayerWeights {
    fc1: Vec<Vec<f64>>,
    fc1_bias: Option<Vec<f64>>,
    fc2: Vec<Vec<f64>>,
    fc2_bias: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct TwoLayerFrozen {
    fc1: Vec<Vec<bool>>,
    fc1_bias: Option<Vec<bool>>,
    fc2: Vec<Vec<bool>>,
    fc2_bias: Option<Vec<bool>>,
}

fn rows_f64<F: Scalar>(layer: &Linear<F>) -> Vec<Vec<f64>> {
    (0..layer.rows())
        .map(|r| layer.row(r).iter().map(|w| w.as_f64()).collect())
        .collect()
}

fn mask_rows(mask: &[bool], cols: usize) -> Vec<Vec<bool>> {
    mask.chunks(cols).map(<[bool]>::to_vec).collect()
}

fn bias_f64<F: Scalar>(layer: &Linear<F>) -> Option<Vec<f64>> {
    layer.bias().map(|b| b.iter().map(|x| x.as_f64()).collect())
}

fn to_value<T: Serialize>(x: &T) -> Value {
    serde_json::to_value(x).expect("serializable")
}

fn from_value<T: for<'de> Deserialize<'de>>(v: Value, what: &str) -> Result<T> {
    serde_json::from_value(v).map_err(|e| Error::Schema(format!("{what}: {e}")))
}

fn head_file<F: Scalar>(h: &SoftmaxHead<F>) -> ModelFile {
    ModelFile {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        kind: "head".into(),
        labels: h.labels().to_vec(),
        dims: to_value(&HeadDims {
            input: h.in_dims(),
            output: h.classes(),
        }),
        weights: to_value(&HeadWeights {
            rows: rows_f64(h.layer()),
            bias: bias_f64(h.layer()),
        }),
        frozen: to_value(&HeadFrozen { rows: h.frozen_rows() }),
    }
}

fn two_layer_file<F: Scalar>(n: &TwoLayerNet<F>) -> ModelFile {
    let fc2 = n.fc2().layer();
    ModelFile {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        kind: "two-layer".into(),
        labels: n.labels().to_vec(),
        dims: to_value(&TwoLayerDims {
            input: n.input_dims(),
            hidden: n.hidden_dims(),
            output: n.classes(),
            fc2_row_width: (0..fc2.rows()).map(|r| fc2.row_width(r)).collect(),
        }),
        weights: to_value(&TwoLayerWeights {
            fc1: rows_f64(n.fc1()),
            fc1_bias: bias_f64(n.fc1()),
            fc2: rows_f64(fc2),
            fc2_bias: bias_f64(fc2),
        }),
        frozen: to_value(&TwoLayerFrozen {
            fc1: mask_rows(n.fc1().frozen_mask(), n.fc1().cols()),
            fc1_bias: n.fc1().bias().map(|_| n.fc1().bias_frozen_mask().to_vec()),
            fc2: mask_rows(fc2.frozen_mask(), fc2.cols()),
            fc2_bias: fc2.bias().map(|_| fc2.bias_frozen_mask().to_vec()),
        }),
    }
}

fn layer_from<F: Scalar>(rows: &[Vec<f64>], bias: &Option<Vec<f64>>) -> Result<Linear<F>> {
    let rows = rows.iter().map(|r| from_f64s(r)).collect::<Result<Vec<_>>>()?;
    let bias = bias.as_deref().map(from_f64s).transpose()?;
    Linear::from_rows(rows, bias)
}

fn parse_head<F: Scalar>(file: ModelFile) -> Result<SoftmaxHead<F>> {
    let dims: HeadDims = from_value(file.dims, "dims")?;
    let weights: HeadWeights = from_value(file.weights, "weights")?;
    let frozen: HeadFrozen = from_value(file.frozen, "frozen")?;
    let mut head = SoftmaxHead::new(file.labels, layer_from(&weights.rows, &weights.bias)?)?;
    if head.in_dims() != dims.input || head.classes() != dims.output {
        return Err(Error::Schema("declared dims disagree with weights".into()));
    }
    head.set_frozen_rows(frozen.rows)?;
    Ok(head)
}

fn flatten_mask(rows: Vec<Vec<bool>>, r: usize, c: usize) -> Result<Vec<bool>> {
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return Err(Error::Schema("frozen mask shape disagrees with weights".into()));
    }
    Ok(rows.into_iter().flatten().collect())
}

fn parse_two_layer<F: Scalar>(file: ModelFile) -> Result<TwoLayerNet<F>> {
    let dims: TwoLayerDims = from_value(file.dims, "dims")?;
    let w: TwoLayerWeights = from_value(file.weights, "weights")?;
    let frozen: TwoLayerFrozen = from_value(file.frozen, "frozen")?;
    let mut fc1 = layer_from::<F>(&w.fc1, &w.fc1_bias)?;
    let mut fc2 = layer_from::<F>(&w.fc2, &w.fc2_bias)?;
    if fc1.cols() != dims.input || fc1.rows() != dims.hidden || fc2.rows() != dims.output {
        return Err(Error::Schema("declared dims disagree with weights".into()));
    }
    let (r1, c1, r2, c2) = (fc1.rows(), fc1.cols(), fc2.rows(), fc2.cols());
    fc1.set_masks(
        flatten_mask(frozen.fc1, r1, c1)?,
        frozen.fc1_bias.unwrap_or_default(),
        vec![c1; r1],
    )?;
    fc2.set_masks(
        flatten_mask(frozen.fc2, r2, c2)?,
        frozen.fc2_bias.unwrap_or_default(),
        dims.fc2_row_width,
    )?;
    TwoLayerNet::new(fc1, SoftmaxHead::new(file.labels, fc2)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("k{i}")).collect()
    }

    #[test]
    fn head_json_round_trip() {
        let mut head = SoftmaxHead::<f64>::init(labels(3), 4, true, 2).unwrap();
        head.set_frozen_rows(2).unwrap();
        let net = Network::Head(head);
        let back = Network::<f64>::from_json(&net.to_json()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn two_layer_json_round_trip() {
        let net = Network::TwoLayer(TwoLayerNet::<f64>::init(5, 3, labels(2), false, 4).unwrap());
        let text = net.to_json();
        assert!(text.contains("\"format\":\"lsne-model\""));
        assert!(text.contains("\"kind\":\"two-layer\""));
        assert_eq!(Network::<f64>::from_json(&text).unwrap(), net);
    }

    #[test]
    fn schema_errors() {
        let net = Network::Head(SoftmaxHead::<f64>::init(labels(2), 2, false, 0).unwrap());
        let text = net.to_json();
        for bad in [
            text.replace("lsne-model", "nope"),
            text.replace("\"version\":1", "\"version\":7"),
            text.replace("\"kind\":\"head\"", "\"kind\":\"conv\""),
            text.replace("\"input\":2", "\"input\":3"),
            text.replace("\"rows\":0", "\"rows\":9"),
            "[]".into(),
        ] {
            assert!(Network::<f64>::from_json(&bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn classify_picks_argmax_label() {
        let head = SoftmaxHead::from_rows(labels(2), vec![vec![1.0], vec![-1.0]], None).unwrap();
        assert_eq!(head.classify(&[2.0]).unwrap(), "k0");
        assert_eq!(head.classify(&[-2.0]).unwrap(), "k1");
    }
}
