use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::heads::{dual_forward, head_manifest, predict_from_logits, DualHeadVars, Prediction};
use crate::image::ImageTensor;
use crate::params::{Bindings, ParamStore, ShapeManifest};
use crate::rng::SplitMix64;
use crate::tensor::{Real, Tensor};
use crate::vit::{count_params, encoder_forward, EncoderConfig, EncoderVars, HeadSpec};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DtvitConfig {
    pub encoder: EncoderConfig,
    /// Hidden width of both head MLPs.
    pub head_hidden: usize,
}

impl DtvitConfig {
    pub fn tiny() -> Self {
        let encoder = EncoderConfig::tiny();
        DtvitConfig {
            encoder,
            head_hidden: encoder.dim,
        }
    }

    pub fn large() -> Self {
        let encoder = EncoderConfig::large();
        DtvitConfig {
            encoder,
            head_hidden: encoder.dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.head_hidden == 0 {
            return Err(Error::invalid("head hidden width must be positive"));
        }
        Ok(())
    }

    pub fn manifest(&self) -> ShapeManifest {
        let mut m = self.encoder.manifest();
        m.extend(head_manifest(self.encoder.dim, self.head_hidden));
        m
    }

    pub fn count_params(&self) -> u64 {
        count_params(&self.encoder, HeadSpec::Dual { hidden: self.head_hidden })
    }
}

/// Which init rule applies to a named tensor.
fn init_kind(name: &str) -> InitKind {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    let is_norm = name.split('.').any(|s| s.starts_with("norm"));
    if is_norm && leaf == "weight" {
        InitKind::Ones
    } else if leaf == "bias" || matches!(leaf, "bq" | "bk" | "bv" | "bo") {
        InitKind::Zeros
    } else {
        InitKind::TruncNormal
    }
}

enum InitKind {
    Ones,
    Zeros,
    TruncNormal,
}

/// Fresh tensor for `name` following the standard ViT init recipe.
pub(crate) fn init_tensor<T: Real>(name: &str, shape: &[usize], rng: &mut SplitMix64) -> Tensor<T> {
    match init_kind(name) {
        InitKind::Ones => Tensor::ones(shape),
        InitKind::Zeros => Tensor::zeros(shape),
        InitKind::TruncNormal => {
            let n = shape.iter().product();
            let data = (0..n).map(|_| T::of(rng.truncated_normal(INIT_STD))).collect();
            Tensor::from_parts(shape.to_vec(), data)
        }
    }
}

/// Graph handles for one bound copy of the model.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub bindings: Bindings,
    pub encoder: EncoderVars,
    pub heads: DualHeadVars,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dtvit<T> {
    config: DtvitConfig,
    params: ParamStore<T>,
}

impl<T: Real> Dtvit<T> {
    pub fn init(config: DtvitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::stream(seed, "init");
        let mut params = ParamStore::new();
        for (name, shape) in config.manifest() {
            let t = init_tensor(&name, &shape, &mut rng);
            params.insert(name, t)?;
        }
        Ok(Dtvit { config, params })
    }

    /// Wraps an existing parameter set after checking it against the config manifest.
    pub fn from_params(config: DtvitConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let manifest = config.manifest();
        for (name, shape) in &manifest {
            let t = params.require(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ParameterShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        if params.len() != manifest.len() {
            let extra = params
                .names()
                .iter()
                .find(|n| !manifest.iter().any(|(m, _)| m == *n))
                .cloned()
                .unwrap_or_default();
            return Err(Error::invalid(format!("unexpected parameter `{extra}`")));
        }
        // Keep canonical order.
        let mut ordered = ParamStore::new();
        for (name, _) in &manifest {
            ordered.insert(name.clone(), params.require(name)?.clone())?;
        }
        Ok(Dtvit {
            config,
            params: ordered,
        })
    }

    pub fn config(&self) -> &DtvitConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> Dtvit<U> {
        Dtvit {
            config: self.config,
            params: self.params.cast(),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<ModelVars> {
        let bindings = self.params.bind(g, trainable);
        let encoder = EncoderVars::from_bindings(&bindings, &self.config.encoder)?;
        let heads = DualHeadVars::from_bindings(&bindings)?;
        Ok(ModelVars {
            bindings,
            encoder,
            heads,
        })
    }

    /// Records the forward pass for a batch; returns (B×2, B×3) logits.
    pub fn forward(&self, g: &mut Graph<T>, vars: &ModelVars, images: &[&ImageTensor]) -> Result<(Var, Var)> {
        let feats = images
            .iter()
            .map(|img| encoder_forward(g, img, &vars.encoder, &self.config.encoder))
            .collect::<Result<Vec<_>>>()?;
        dual_forward(g, &feats, &vars.heads)
    }

    /// Inference-only logits for a batch.
    pub fn logits(&self, images: &[&ImageTensor]) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false)?;
        let (l1, l2) = self.forward(&mut g, &vars, images)?;
        Ok((g.value(l1).clone(), g.value(l2).clone()))
    }

    pub fn predict(&self, image: &ImageTensor) -> Result<Prediction> {
        let (l1, l2) = self.logits(&[image])?;
        predict_from_logits(&l1.to_f64_vec(), &l2.to_f64_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_rules() {
        let m = Dtvit::<f32>::init(DtvitConfig::tiny(), 1).unwrap();
        let p = m.params();
        assert!(p.get("blocks.0.norm1.weight").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(p.get("norm.bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(p.get("blocks.1.attn.bq").unwrap().data().iter().all(|&v| v == 0.0));
        let w = p.get("blocks.0.attn.wq").unwrap();
        assert!(w.data().iter().all(|&v| v.abs() <= 0.04));
        assert!(w.data().iter().any(|&v| v != 0.0));
        assert!(p.get("pos_embed").unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn tiny_count_matches_instantiated_params() {
        let cfg = DtvitConfig::tiny();
        let m = Dtvit::<f32>::init(cfg, 0).unwrap();
        assert_eq!(m.params().numel(), cfg.count_params());
    }

    #[test]
    fn from_params_rejects_wrong_shape() {
        let cfg = DtvitConfig::tiny();
        let m = Dtvit::<f32>::init(cfg, 0).unwrap();
        let mut params = m.params().clone();
        *params.get_mut("cls_token").unwrap() = Tensor::zeros(&[63]);
        assert!(matches!(
            Dtvit::from_params(cfg, params),
            Err(Error::ParameterShape { .. })
        ));
    }
}
