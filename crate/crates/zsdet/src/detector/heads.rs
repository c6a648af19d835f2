//! Head branches over RoI-pooled grids: the classification/distillation
//! branch (convs + linears into the embedding space), the regression branch,
//! the semantic regressor (delta map over feature-plus-embedding
//! concatenations) and the text-classifier state.

use ndarray::{Array1, Array2, Array4, Axis};
use rand_chacha::ChaCha8Rng;

use crate::encoder::TextEmbedding;
use crate::error::Error;
use crate::nn::{relu2, relu4, Conv2d, Conv2dCtx, Linear, LinearCtx, Param, ParamSet};

/// Two 3x3 convs followed by linear layers, ReLU between every pair of
/// layers, linear output. Maps `[N, C, P, P]` pooled grids to `[N, out]`.
pub struct ConvBranch {
    name: String,
    pub convs: Vec<Conv2d>,
    pub fcs: Vec<Linear>,
    p: usize,
    mid_ch: usize,
}

pub struct ConvBranchCtx {
    conv: Vec<(Conv2dCtx, Array4<f64>)>,
    flat_dim: (usize, usize),
    fc: Vec<(LinearCtx, Option<Array2<f64>>)>, // ctx + relu mask (None on last)
}

impl ConvBranch {
    /// `fc_dims` are the linear layer widths after flattening; the last is
    /// the branch output dimension.
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        mid_ch: usize,
        p: usize,
        fc_dims: &[usize],
    ) -> Self {
        let convs = vec![
            Conv2d::new(rng, in_ch, mid_ch, 3, 1, 1),
            Conv2d::new(rng, mid_ch, mid_ch, 3, 1, 1),
        ];
        let mut fcs = Vec::new();
        let mut in_dim = mid_ch * p * p;
        for &d in fc_dims {
            fcs.push(Linear::new(rng, in_dim, d));
            in_dim = d;
        }
        Self {
            name: name.to_string(),
            convs,
            fcs,
            p,
            mid_ch,
        }
    }

    pub fn forward(&self, pooled: &Array4<f64>) -> (Array2<f64>, ConvBranchCtx) {
        let n = pooled.dim().0;
        let mut conv_ctx = Vec::new();
        let mut cur = pooled.clone();
        for conv in &self.convs {
            let (mut y, ctx) = conv.forward(&cur);
            let mask = relu4(&mut y);
            conv_ctx.push((ctx, mask));
            cur = y;
        }
        let flat_dim = (n, self.mid_ch * self.p * self.p);
        let mut flat = cur.into_shape_with_order(flat_dim).unwrap();
        let mut fc_ctx = Vec::new();
        for (i, fc) in self.fcs.iter().enumerate() {
            let (mut y, ctx) = fc.forward(&flat);
            let mask = if i + 1 < self.fcs.len() {
                Some(relu2(&mut y))
            } else {
                None
            };
            fc_ctx.push((ctx, mask));
            flat = y;
        }
        (
            flat,
            ConvBranchCtx {
                conv: conv_ctx,
                flat_dim,
                fc: fc_ctx,
            },
        )
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. the
    /// pooled input grid.
    pub fn backward(&mut self, ctx: &ConvBranchCtx, grad_out: &Array2<f64>) -> Array4<f64> {
        let mut grad = grad_out.clone();
        for (fc, (fctx, mask)) in self.fcs.iter_mut().zip(ctx.fc.iter()).rev() {
            if let Some(m) = mask {
                grad = &grad * m;
            }
            grad = fc.backward(fctx, &grad);
        }
        let (n, _) = ctx.flat_dim;
        let mut grad4 = grad
            .into_shape_with_order((n, self.mid_ch, self.p, self.p))
            .unwrap();
        for (conv, (cctx, mask)) in self.convs.iter_mut().zip(ctx.conv.iter()).rev() {
            grad4 = &grad4 * mask;
            grad4 = conv.backward(cctx, &grad4);
        }
        grad4
    }
}

impl ParamSet for ConvBranch {
    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        let name = self.name.clone();
        for (i, c) in self.convs.iter_mut().enumerate() {
            f(&format!("{name}.conv{i}.w"), &mut c.w);
            f(&format!("{name}.conv{i}.b"), &mut c.b);
        }
        for (i, l) in self.fcs.iter_mut().enumerate() {
            f(&format!("{name}.fc{i}.w"), &mut l.w);
            f(&format!("{name}.fc{i}.b"), &mut l.b);
        }
    }
}

/// The semantic regressor output map: `Cat(r_i, embedding) -> 4 deltas`,
/// class-agnostic.
pub struct SemanticRegressor {
    pub fc: Linear,
    pub reg_dim: usize,
    pub embed_dim: usize,
}

pub struct SemanticRegressorCtx {
    lin: LinearCtx,
}

impl SemanticRegressor {
    pub fn new(rng: &mut ChaCha8Rng, reg_dim: usize, embed_dim: usize) -> Self {
        let mut fc = Linear::new(rng, reg_dim + embed_dim, 4);
        // Near-zero init keeps the initial refinement close to the identity
        // transform; the delta head sees few foreground samples per step and
        // never recovers from a large random starting point.
        fc.w.v.mapv_inplace(|v| v * 1e-3);
        Self { fc, reg_dim, embed_dim }
    }

    /// Concatenates each regression feature with its category embedding and
    /// applies the delta map.
    pub fn forward(
        &self,
        reg_feats: &Array2<f64>,
        embeddings: &[&Array1<f64>],
    ) -> Result<(Array2<f64>, SemanticRegressorCtx), Error> {
        let k = reg_feats.nrows();
        if embeddings.len() != k {
            return Err(Error::InvalidArgument(format!(
                "semantic_regress: {k} features vs {} embeddings",
                embeddings.len()
            )));
        }
        if reg_feats.ncols() != self.reg_dim {
            return Err(Error::DimensionMismatch {
                expected: self.reg_dim,
                got: reg_feats.ncols(),
            });
        }
        let mut cat = Array2::<f64>::zeros((k, self.reg_dim + self.embed_dim));
        for i in 0..k {
            if embeddings[i].len() != self.embed_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.embed_dim,
                    got: embeddings[i].len(),
                });
            }
            cat.row_mut(i)
                .slice_mut(ndarray::s![..self.reg_dim])
                .assign(&reg_feats.row(i));
            cat.row_mut(i)
                .slice_mut(ndarray::s![self.reg_dim..])
                .assign(embeddings[i]);
        }
        let (deltas, lin) = self.fc.forward(&cat);
        Ok((deltas, SemanticRegressorCtx { lin }))
    }

    /// Returns the gradient w.r.t. the regression features (the embedding
    /// side is fixed text and receives none).
    pub fn backward(&mut self, ctx: &SemanticRegressorCtx, grad_deltas: &Array2<f64>) -> Array2<f64> {
        let grad_cat = self.fc.backward(&ctx.lin, grad_deltas);
        grad_cat.slice_axis(Axis(1), (0..self.reg_dim).into()).to_owned()
    }
}

impl ParamSet for SemanticRegressor {
    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("regressor.fc.w", &mut self.fc.w);
        f("regressor.fc.b", &mut self.fc.b);
    }
}

/// Classifier dictionary: fixed base embeddings, inference-time novel
/// embeddings, a learnable background vector and the temperature.
pub struct TextClassifierState {
    pub base: Vec<TextEmbedding>,
    pub novel: Vec<TextEmbedding>,
    pub bg: Param,
    pub tau: f64,
}

impl TextClassifierState {
    pub fn new(rng: &mut ChaCha8Rng, base: Vec<TextEmbedding>, tau: f64) -> Self {
        let d = base.first().map(|e| e.values.len()).unwrap_or(0);
        let bg = Param::new(crate::nn::kaiming(rng, &[d], d));
        Self {
            base,
            novel: Vec::new(),
            bg,
            tau,
        }
    }

    pub fn bg_vec(&self) -> Array1<f64> {
        self.bg
            .v
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned()
    }

    /// Background slot index in train-mode logits.
    pub fn bg_label(&self) -> usize {
        self.base.len()
    }
}
