//! Presence and location decoders over the class-token feature, and the
//! equally weighted two-task loss.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_along, Graph, Var};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::params::{Bindings, ShapeManifest};
use crate::tensor::{Real, Tensor};
use crate::vit::linear;

/// Weights of the presence and location losses; they sum to one.
pub const LOSS_WEIGHTS: (f64, f64) = (0.5, 0.5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Presence {
    Normal,
    Ich,
}

impl Presence {
    pub const ALL: [Presence; 2] = [Presence::Normal, Presence::Ich];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for Presence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Presence::Normal => "normal",
            Presence::Ich => "ich",
        })
    }
}

impl FromStr for Presence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "normal" => Ok(Presence::Normal),
            "ich" => Ok(Presence::Ich),
            _ => Err(Error::invalid(format!("unknown presence label `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Location {
    Deep,
    Lobar,
    Subtentorial,
}

impl Location {
    pub const ALL: [Location; 3] = [Location::Deep, Location::Lobar, Location::Subtentorial];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn title(self) -> &'static str {
        match self {
            Location::Deep => "Deep",
            Location::Lobar => "Lobar",
            Location::Subtentorial => "Subtentorial",
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Location::Deep => "deep",
            Location::Lobar => "lobar",
            Location::Subtentorial => "subtentorial",
        })
    }
}

impl FromStr for Location {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "deep" => Ok(Location::Deep),
            "lobar" => Ok(Location::Lobar),
            "subtentorial" => Ok(Location::Subtentorial),
            _ => Err(Error::invalid(format!("unknown location label `{s}`"))),
        }
    }
}

pub fn check_labels(presence: Presence, location: Option<Location>) -> Result<()> {
    match (presence, location) {
        (Presence::Normal, Some(l)) => Err(Error::invalid(format!(
            "location `{l}` given for a normal sample"
        ))),
        (Presence::Ich, None) => Err(Error::invalid("ICH sample without a location label")),
        _ => Ok(()),
    }
}

/// Image with its presence label and, for ICH images, the location label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: ImageTensor,
    pub presence: Presence,
    pub location: Option<Location>,
}

impl LabeledSample {
    pub fn new(image: ImageTensor, presence: Presence, location: Option<Location>) -> Result<Self> {
        check_labels(presence, location)?;
        Ok(LabeledSample {
            image,
            presence,
            location,
        })
    }
}

/// Names and shapes of both heads for embedding width `dim`.
pub fn head_manifest(dim: usize, hidden: usize) -> ShapeManifest {
    let mut m = ShapeManifest::new();
    for (name, classes) in [("head1", 2), ("head2", 3)] {
        m.push((format!("{name}.fc1.weight"), vec![hidden, dim]));
        m.push((format!("{name}.fc1.bias"), vec![hidden]));
        m.push((format!("{name}.fc2.weight"), vec![classes, hidden]));
        m.push((format!("{name}.fc2.bias"), vec![classes]));
    }
    m
}

#[derive(Debug, Clone, Copy)]
pub struct MlpHeadVars {
    pub fc1: (Var, Var),
    pub fc2: (Var, Var),
}

impl MlpHeadVars {
    fn from_bindings(b: &Bindings, name: &str) -> Result<Self> {
        let v = |s: &str| b.var(&format!("{name}.{s}"));
        Ok(MlpHeadVars {
            fc1: (v("fc1.weight")?, v("fc1.bias")?),
            fc2: (v("fc2.weight")?, v("fc2.bias")?),
        })
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = linear(g, x, self.fc1.0, self.fc1.1)?;
        let h = g.gelu(h)?;
        linear(g, h, self.fc2.0, self.fc2.1)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DualHeadVars {
    pub presence: MlpHeadVars,
    pub location: MlpHeadVars,
}

impl DualHeadVars {
    pub fn from_bindings(b: &Bindings) -> Result<Self> {
        Ok(DualHeadVars {
            presence: MlpHeadVars::from_bindings(b, "head1")?,
            location: MlpHeadVars::from_bindings(b, "head2")?,
        })
    }
}

/// Applies both heads to the class-token row of each feature sequence.
/// Returns (B×2 presence logits, B×3 location logits).
pub fn dual_forward<T: Real>(g: &mut Graph<T>, features: &[Var], heads: &DualHeadVars) -> Result<(Var, Var)> {
    if features.is_empty() {
        return Err(Error::invalid("dual_forward on an empty batch"));
    }
    let rows = features
        .iter()
        .map(|&f| g.slice(f, 0, 0, 1))
        .collect::<Result<Vec<_>>>()?;
    let cls = if rows.len() == 1 { rows[0] } else { g.concat(&rows, 0)? };
    let l1 = heads.presence.apply(g, cls)?;
    let l2 = heads.location.apply(g, cls)?;
    Ok((l1, l2))
}

#[derive(Debug, Clone, Copy)]
pub struct DualLoss {
    pub presence: Var,
    /// Absent when the batch holds no ICH sample.
    pub location: Option<Var>,
    pub combined: Var,
}

impl DualLoss {
    pub fn values<T: Real>(&self, g: &Graph<T>) -> (f64, Option<f64>, f64) {
        (
            g.value(self.presence).item().as_f64(),
            self.location.map(|v| g.value(v).item().as_f64()),
            g.value(self.combined).item().as_f64(),
        )
    }
}

/// Plain-number form of the combined loss.
pub fn combine(presence_loss: f64, location_loss: Option<f64>) -> f64 {
    LOSS_WEIGHTS.0 * presence_loss + LOSS_WEIGHTS.1 * location_loss.unwrap_or(0.0)
}

/// Presence cross-entropy over the whole batch plus location cross-entropy
/// over the ICH samples only, weighted 0.5 / 0.5.
pub fn combined_loss<T: Real>(
    g: &mut Graph<T>,
    presence_logits: Var,
    presence: &[Presence],
    location_logits: Var,
    location: &[Option<Location>],
) -> Result<DualLoss> {
    if presence.len() != location.len() {
        return Err(Error::invalid(format!(
            "{} presence labels but {} location labels",
            presence.len(),
            location.len()
        )));
    }
    for (&p, &l) in presence.iter().zip(location) {
        check_labels(p, l)?;
    }
    let targets1: Vec<usize> = presence.iter().map(|p| p.index()).collect();
    let loss1 = g.cross_entropy(presence_logits, &targets1)?;

    let (rows, targets2): (Vec<usize>, Vec<usize>) = location
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.map(|l| (i, l.index())))
        .unzip();
    let w1 = g.scale(loss1, T::of(LOSS_WEIGHTS.0))?;
    if rows.is_empty() {
        return Ok(DualLoss {
            presence: loss1,
            location: None,
            combined: w1,
        });
    }
    let masked = g.select_rows(location_logits, &rows)?;
    let loss2 = g.cross_entropy(masked, &targets2)?;
    let w2 = g.scale(loss2, T::of(LOSS_WEIGHTS.1))?;
    let combined = g.add(w1, w2)?;
    Ok(DualLoss {
        presence: loss1,
        location: Some(loss2),
        combined,
    })
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub presence: Presence,
    /// Reported only when `presence` is ICH.
    pub location: Option<Location>,
    /// Location argmax regardless of gating, for ICH-only evaluation.
    pub raw_location: Location,
    pub presence_probs: [f64; 2],
    pub location_probs: [f64; 3],
}

impl fmt::Display for Prediction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.location {
            Some(l) => write!(f, "ICH {}", l.title()),
            None => write!(f, "NORMAL"),
        }
    }
}

pub fn predict_from_logits(presence_logits: &[f64], location_logits: &[f64]) -> Result<Prediction> {
    if presence_logits.len() != 2 || location_logits.len() != 3 {
        return Err(Error::Shape {
            op: "predict",
            lhs: vec![presence_logits.len()],
            rhs: vec![location_logits.len()],
        });
    }
    let probs = |xs: &[f64]| -> Result<Vec<f64>> {
        let t = Tensor::<f64>::new(&[xs.len()], xs.to_vec())?;
        Ok(softmax_along(&t, 0).into_data())
    };
    let p1 = probs(presence_logits)?;
    let p2 = probs(location_logits)?;
    let presence = Presence::from_index(argmax(presence_logits)).expect("two classes");
    let raw_location = Location::from_index(argmax(location_logits)).expect("three classes");
    Ok(Prediction {
        presence,
        location: (presence == Presence::Ich).then_some(raw_location),
        raw_location,
        presence_probs: [p1[0], p1[1]],
        location_probs: [p2[0], p2[1], p2[2]],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combine_arithmetic() {
        assert_eq!(combine(0.7, Some(0.7)), 0.7);
        assert!((combine(0.2, Some(0.4)) - 0.3).abs() < 1e-15);
        assert_eq!(combine(0.2, Some(0.4)), combine(0.4, Some(0.2)));
        assert_eq!(LOSS_WEIGHTS.0 + LOSS_WEIGHTS.1, 1.0);
    }

    #[test]
    fn all_normal_batch_uses_presence_loss_only() {
        let mut g = Graph::<f64>::new();
        let l1 = g.constant(Tensor::zeros(&[4, 2]));
        let l2 = g.constant(Tensor::zeros(&[4, 3]));
        let loss = combined_loss(&mut g, l1, &[Presence::Normal; 4], l2, &[None; 4]).unwrap();
        let (a, b, c) = loss.values(&g);
        assert!((a - 2f64.ln()).abs() < 1e-15);
        assert_eq!(b, None);
        assert!((c - 0.5 * 2f64.ln()).abs() < 1e-15);
        assert!((c - 0.3466).abs() < 1e-4);
    }

    #[test]
    fn location_on_normal_is_rejected() {
        let mut g = Graph::<f64>::new();
        let l1 = g.constant(Tensor::zeros(&[1, 2]));
        let l2 = g.constant(Tensor::zeros(&[1, 3]));
        assert!(combined_loss(&mut g, l1, &[Presence::Normal], l2, &[Some(Location::Deep)]).is_err());
        assert!(combined_loss(&mut g, l1, &[Presence::Ich], l2, &[None]).is_err());
    }

    #[test]
    fn masked_location_loss_ignores_normal_rows() {
        let mut g = Graph::<f64>::new();
        let l1 = g.constant(Tensor::zeros(&[2, 2]));
        // Row 0 (normal) has extreme logits that must not matter.
        let l2 = g.constant(Tensor::from_f64(&[2, 3], &[50.0, -50.0, 0.0, 1.0, 2.0, 3.0]).unwrap());
        let loss = combined_loss(
            &mut g,
            l1,
            &[Presence::Normal, Presence::Ich],
            l2,
            &[None, Some(Location::Subtentorial)],
        )
        .unwrap();
        let (_, b, _) = loss.values(&g);
        assert!((b.unwrap() - 0.407_605_964).abs() < 1e-8);
    }

    #[test]
    fn prediction_gating_and_ties() {
        let p = predict_from_logits(&[2.0, -1.0], &[0.0, 0.0, 5.0]).unwrap();
        assert_eq!(p.presence, Presence::Normal);
        assert_eq!(p.location, None);
        assert_eq!(p.to_string(), "NORMAL");

        let p = predict_from_logits(&[-1.0, 2.0], &[0.1, 0.9, 0.2]).unwrap();
        assert_eq!(p.presence, Presence::Ich);
        assert_eq!(p.location, Some(Location::Lobar));
        assert_eq!(p.to_string(), "ICH Lobar");

        let p = predict_from_logits(&[0.0, 0.0], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(p.presence, Presence::Normal);
        assert_eq!(p.raw_location, Location::Deep);
        assert!((p.presence_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn label_parsing() {
        assert_eq!("ICH".parse::<Presence>().unwrap(), Presence::Ich);
        assert_eq!("Subtentorial".parse::<Location>().unwrap(), Location::Subtentorial);
        assert!("none".parse::<Location>().is_err());
    }
}
