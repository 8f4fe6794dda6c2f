//! The tangent model: a first-order expansion of a trained network around
//! frozen anchor weights.
//!
//! Writing the base network as `p(theta; x)`, the tangent model is
//!
//! ```text
//! g(w; x) = p(theta; x) + J(x) w        J(x) = d p(theta; x) / d theta
//! ```
//!
//! with `theta` fixed and only `w` trainable. Logits are affine in `w`, so
//! cross-entropy and squared-error objectives over `g` are convex in `w` and
//! training cannot disturb what the anchor network knows: `theta` stays
//! bitwise identical, which this module actively verifies.
//!
//! `J w` is computed by a dual-number forward pass (one extra forward, no
//! materialized Jacobian). Gradients in `w` come from the identity
//! `dL/dw = J^T (dL/dg)`: a reverse sweep through the anchor graph seeded
//! with the loss gradient at the logits, restricted to the masked layers.

use serde::{Deserialize, Serialize};

use crate::autodiff::{cross_entropy_grad, cross_entropy_value, label_indices, mse_rows_value};
use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::models::{LogitFn, Model};
use crate::scalar::Scalar;

/// Which layers' parameters participate in the tangent direction `w`. The
/// unmasked directions are identically zero and never materialized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMask {
    /// Final two parameterized layers (the default).
    FinalTwo,
    /// Final layer only.
    Final,
    /// Every parameter.
    All,
    /// Explicit layer indices into the architecture's layer list.
    Layers(Vec<usize>),
}

impl Default for LayerMask {
    fn default() -> Self {
        LayerMask::FinalTwo
    }
}

/// Weights of the tangent training objective
/// `ce * CE(g, y) + logit_mse * MSE(g, b) + l2 * ||w||^2`, with MSE the
/// element-mean squared logit distance.
#[derive(Clone, Copy, Debug)]
pub struct TangentLossWeights {
    pub ce: f64,
    pub logit_mse: f64,
    pub l2: f64,
}

/// Unweighted term values plus the weighted total, for loss-decomposition
/// checks and logging.
#[derive(Clone, Copy, Debug)]
pub struct TangentLossTerms {
    pub ce: f64,
    pub logit_mse: f64,
    pub w_l2: f64,
    pub total: f64,
}

/// Frozen anchor model plus trainable tangent direction.
#[derive(Clone, Debug)]
pub struct TangentModel<F> {
    base: Model<F>,
    w: ParamSet<F>,
    mask_names: Vec<String>,
    anchor_digest: u64,
}

impl<F: Scalar> TangentModel<F> {
    /// Linearizes `model` around its current weights. `w` starts at zero, so
    /// the fresh tangent model reproduces the base logits exactly.
    pub fn new(model: &Model<F>, mask: &LayerMask) -> Result<Self> {
        let mask_names = resolve_mask(model, mask)?;
        let mut w = ParamSet::new();
        for name in &mask_names {
            let p = model
                .params()
                .get(name)
                .ok_or_else(|| Error::Config(format!("mask names unknown param '{}'", name)))?;
            w.set(name.clone(), Tensor::zeros(p.shape()));
        }
        let anchor_digest = model.params().bits_digest();
        Ok(TangentModel { base: model.clone(), w, mask_names, anchor_digest })
    }

    pub fn base(&self) -> &Model<F> {
        &self.base
    }

    pub fn w(&self) -> &ParamSet<F> {
        &self.w
    }

    /// Mutable access to the tangent direction for the optimizer. The anchor
    /// has no mutable access path; [`TangentModel::verify_anchor`] proves it
    /// stayed untouched.
    pub fn w_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.w
    }

    pub fn mask_names(&self) -> &[String] {
        &self.mask_names
    }

    /// Number of trainable scalars in `w`.
    pub fn dim_w(&self) -> usize {
        self.w.num_elements()
    }

    /// Confirms the anchor weights carry the same bits as at linearization.
    pub fn verify_anchor(&self) -> Result<()> {
        if self.base.params().bits_digest() != self.anchor_digest {
            return Err(Error::Invariant(
                "tangent anchor weights changed since linearization".into(),
            ));
        }
        Ok(())
    }

    /// Base logits and the directional term `J w`, in one dual pass.
    pub fn logits_split(&self, x: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        let (graph, logits_node) = self.base.graph();
        let eval = graph.forward_dual(self.base.params(), &[("x", x)], &self.w)?;
        Ok((eval.value(logits_node).clone(), eval.tangent(logits_node).unwrap().clone()))
    }

    /// Loss terms and the exact gradient of the weighted objective w.r.t.
    /// `w` on one batch. `frozen` supplies the logit targets `b` for the
    /// squared-error term and is required when its weight is nonzero. No
    /// gradient w.r.t. the anchor is ever produced.
    pub fn grad_w(
        &self,
        x: &Tensor<F>,
        y: &Tensor<F>,
        frozen: Option<&Tensor<F>>,
        weights: &TangentLossWeights,
    ) -> Result<(TangentLossTerms, ParamSet<F>)> {
        let (graph, logits_node) = self.base.graph();
        let eval = graph.forward_dual(self.base.params(), &[("x", x)], &self.w)?;
        let g = eval.value(logits_node).zip_map(eval.tangent(logits_node).unwrap(), |a, b| a + b);

        let labels = label_indices(&g, y)?;
        let ce_term = cross_entropy_value(&g, &labels).to_f64();

        let mse_term = match frozen {
            Some(b) => {
                if b.shape() != g.shape() {
                    return Err(Error::shape(
                        "tangent grad",
                        format!("frozen logits {:?} vs logits {:?}", b.shape(), g.shape()),
                    ));
                }
                mse_rows_value(&g, b).to_f64()
            }
            None if weights.logit_mse != 0.0 => {
                return Err(Error::Config(
                    "logit-matching term requested but no frozen logits supplied".into(),
                ))
            }
            None => 0.0,
        };

        let w_l2 = self.w.l2_sq().to_f64();
        let total = weights.ce * ce_term + weights.logit_mse * mse_term + weights.l2 * w_l2;

        // dL/dg, assembled analytically per term.
        let mut dg = Tensor::zeros(g.shape());
        if weights.ce != 0.0 {
            let ce_grad = cross_entropy_grad(&g, &labels, F::from_f64(weights.ce));
            dg.add_assign(&ce_grad);
        }
        if weights.logit_mse != 0.0 {
            let b = frozen.expect("checked above");
            let c = F::from_f64(2.0 * weights.logit_mse / g.len() as f64);
            dg.add_assign(&g.zip_map(b, |gv, bv| c * (gv - bv)));
        }

        // dL/dw = J^T dg, restricted to the mask, plus the regularizer.
        let full = graph.vjp(&eval, logits_node, &dg)?;
        let mut grads = ParamSet::new();
        let reg = F::from_f64(2.0 * weights.l2);
        for name in &self.mask_names {
            let jt = match full.get(name) {
                Some(t) => t.clone(),
                None => Tensor::zeros(self.w.get(name).unwrap().shape()),
            };
            let mut gw = jt;
            gw.add_scaled_assign(self.w.get(name).unwrap(), reg);
            grads.set(name.clone(), gw);
        }

        Ok((
            TangentLossTerms { ce: ce_term, logit_mse: mse_term, w_l2, total },
            grads,
        ))
    }

    /// Loss terms only, on one batch.
    pub fn loss_terms(
        &self,
        x: &Tensor<F>,
        y: &Tensor<F>,
        frozen: Option<&Tensor<F>>,
        weights: &TangentLossWeights,
    ) -> Result<TangentLossTerms> {
        Ok(self.grad_w(x, y, frozen, weights)?.0)
    }
}

impl<F: Scalar> LogitFn<F> for TangentModel<F> {
    fn logits(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (p, jw) = self.logits_split(x)?;
        Ok(p.zip_map(&jw, |a, b| a + b))
    }

    fn num_classes(&self) -> usize {
        self.base.num_classes()
    }
}

fn resolve_mask<F: Scalar>(model: &Model<F>, mask: &LayerMask) -> Result<Vec<String>> {
    let names = match mask {
        LayerMask::FinalTwo => model.last_layers_param_names(2),
        LayerMask::Final => model.final_layer_param_names(),
        LayerMask::All => model.all_param_names(),
        LayerMask::Layers(layers) => {
            let param_layers = model.arch().param_layers();
            let mut names = Vec::new();
            for &l in layers {
                if !param_layers.contains(&l) {
                    return Err(Error::Config(format!(
                        "mask layer {} is not a parameterized layer (have {:?})",
                        l, param_layers
                    )));
                }
                names.extend(model.layer_param_names(l));
            }
            names
        }
    };
    if names.is_empty() {
        return Err(Error::Config("tangent mask selects no parameters".into()));
    }
    Ok(names)
}
