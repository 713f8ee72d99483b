use std::collections::BTreeMap;

use super::{FslHead, Group, Mode, ModelBundle};
use crate::error::{Error, Result};
use crate::tensor::{BatchStats, BnMode, Tape, Tensor, Var};

/// Outputs of the disentangle module for one batch.
#[derive(Clone, Copy, Debug)]
pub struct Disentangled {
    /// Domain-irrelevant feature.
    pub h1: Var,
    /// Domain-specific feature.
    pub h2: Var,
    pub mean_a: Var,
    pub logvar_a: Var,
    pub mean_b: Var,
    pub logvar_b: Var,
}

/// Gradients per parameter set (in [`Group::ALL`] order) and the batch
/// statistics observed by each batch-norm layer, in forward order.
#[derive(Clone, Debug, Default)]
pub struct GraphGrads {
    pub grads: [BTreeMap<String, Vec<f64>>; 5],
    pub bn_updates: Vec<(String, BatchStats)>,
}

/// One forward pass of a [`ModelBundle`] recorded on a fresh tape.
pub struct Graph<'m> {
    pub tape: Tape,
    model: &'m ModelBundle,
    bound: [BTreeMap<String, Var>; 5],
    bn_updates: Vec<(String, BatchStats)>,
}

impl<'m> Graph<'m> {
    pub fn new(model: &'m ModelBundle) -> Result<Self> {
        let mut tape = Tape::new();
        let mut bound: [BTreeMap<String, Var>; 5] = Default::default();
        for g in Group::ALL {
            model.set(g).bind(&mut tape, &mut bound[g.index()])?;
        }
        Ok(Graph {
            tape,
            model,
            bound,
            bn_updates: Vec::new(),
        })
    }

    /// Uses `params` (one per parameter, in [`ModelBundle::param_tensors`]
    /// order) already on `tape` instead of binding the model's own values.
    pub fn with_params(model: &'m ModelBundle, tape: Tape, params: &[Var]) -> Result<Self> {
        let expected: usize = Group::ALL.iter().map(|&g| model.set(g).len()).sum();
        if params.len() != expected {
            return Err(Error::invalid(format!(
                "expected {expected} parameter variables, got {}",
                params.len()
            )));
        }
        let mut bound: [BTreeMap<String, Var>; 5] = Default::default();
        let mut it = params.iter();
        for g in Group::ALL {
            for name in model.set(g).names() {
                bound[g.index()].insert(name.to_string(), *it.next().expect("length checked"));
            }
        }
        Ok(Graph {
            tape,
            model,
            bound,
            bn_updates: Vec::new(),
        })
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }

    pub fn latent_dim(&self) -> usize {
        self.model.config.latent_dim
    }

    pub fn mode(&self) -> Mode {
        self.model.mode
    }

    pub fn param(&self, g: Group, name: &str) -> Result<Var> {
        self.bound[g.index()]
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("no parameter `{}.{name}`", g.name())))
    }

    /// Places a `B×3×S×S` image batch on the tape.
    pub fn input(&mut self, images: Tensor) -> Result<Var> {
        let s = self.model.config.image_size;
        match images.shape() {
            [_, 3, h, w] if *h == s && *w == s => self.tape.constant(images),
            other => Err(Error::invalid(format!(
                "expected a B×3×{s}×{s} image batch, got shape {other:?}"
            ))),
        }
    }

    fn bn(&mut self, x: Var, g: Group, layer: &str) -> Result<Var> {
        let gamma = self.param(g, &format!("{layer}.gamma"))?;
        let beta = self.param(g, &format!("{layer}.beta"))?;
        let key = format!("{}.{layer}", g.name());
        match self.model.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm(x, gamma, beta, BnMode::Train)?;
                if let Some(s) = stats {
                    self.bn_updates.push((key, s));
                }
                Ok(y)
            }
            Mode::Eval => {
                let r = self
                    .model
                    .bn_running
                    .get(&key)
                    .ok_or_else(|| Error::invalid(format!("missing running statistics for `{key}`")))?;
                Ok(self
                    .tape
                    .batch_norm(
                        x,
                        gamma,
                        beta,
                        BnMode::Eval {
                            mean: &r.mean,
                            var: &r.var,
                        },
                    )?
                    .0)
            }
        }
    }

    fn linear(&mut self, x: Var, g: Group, prefix: &str) -> Result<Var> {
        let w = self.param(g, &format!("{prefix}weight"))?;
        let b = self.param(g, &format!("{prefix}bias"))?;
        self.tape.linear(x, w, Some(b))
    }

    /// Backbone: four conv3×3 → BN → ReLU → 2×2 mean-pool blocks, then a
    /// linear projection to `feature_dim`.
    pub fn extract_features(&mut self, images: Var) -> Result<Var> {
        let mut x = images;
        for i in 0..4 {
            let w = self.param(Group::Backbone, &format!("conv{i}.weight"))?;
            x = self.tape.conv2d(x, w, None, 1, 1)?;
            x = self.bn(x, Group::Backbone, &format!("bn{i}"))?;
            x = self.tape.relu(x)?;
            x = self.tape.mean_pool2(x)?;
        }
        let b = self.tape.shape(x)[0];
        let flat = self.tape.shape(x)[1..].iter().product();
        let x = self.tape.reshape(x, &[b, flat])?;
        self.linear(x, Group::Backbone, "proj.")
    }

    /// FC1 → BN → ReLU, then two (mean, log-variance) head pairs. In training
    /// mode `noise` supplies the standard-normal draws for H1 and H2; in
    /// evaluation mode the means are returned and `noise` is ignored.
    pub fn disentangle(&mut self, f: Var, noise: Option<(&Tensor, &Tensor)>) -> Result<Disentangled> {
        let x = self.linear(f, Group::Disentangle, "fc1.")?;
        let x = self.bn(x, Group::Disentangle, "bn1")?;
        let x = self.tape.relu(x)?;
        let mean_a = self.linear(x, Group::Disentangle, "fc21a.")?;
        let logvar_a = self.linear(x, Group::Disentangle, "fc22a.")?;
        let mean_b = self.linear(x, Group::Disentangle, "fc21b.")?;
        let logvar_b = self.linear(x, Group::Disentangle, "fc22b.")?;
        let (h1, h2) = match self.model.mode {
            Mode::Eval => (mean_a, mean_b),
            Mode::Train => {
                let (na, nb) = noise.ok_or_else(|| Error::invalid("disentangle: training mode needs noise tensors"))?;
                let na = self.tape.constant(na.clone())?;
                let nb = self.tape.constant(nb.clone())?;
                (
                    self.tape.reparameterize(mean_a, logvar_a, na)?,
                    self.tape.reparameterize(mean_b, logvar_b, nb)?,
                )
            }
        };
        Ok(Disentangled {
            h1,
            h2,
            mean_a,
            logvar_a,
            mean_b,
            logvar_b,
        })
    }

    pub fn classify_fc(&mut self, h1: Var) -> Result<Var> {
        self.linear(h1, Group::Classifier, "")
    }

    /// Index 1 is the source domain, index 0 the target domain.
    pub fn domain_logits(&mut self, h: Var) -> Result<Var> {
        self.linear(h, Group::Domain, "")
    }

    pub fn fsl_logits(&mut self, support: Var, labels: &[usize], n_way: usize, query: Var) -> Result<Var> {
        fsl_logits(&mut self.tape, self.model.config.head, support, labels, n_way, query)
    }

    /// Runs reverse mode from `loss` and hands back everything
    /// [`ModelBundle::apply`] needs.
    pub fn backward(mut self, loss: Var) -> Result<GraphGrads> {
        self.tape.backward(loss)?;
        let mut grads: [BTreeMap<String, Vec<f64>>; 5] = Default::default();
        for (out, bound) in grads.iter_mut().zip(&self.bound) {
            for (name, &v) in bound {
                if let Some(g) = self.tape.grad(v) {
                    out.insert(name.clone(), g.to_vec());
                }
            }
        }
        Ok(GraphGrads {
            grads,
            bn_updates: self.bn_updates,
        })
    }
}

/// Logits `NM×N` of query features against an `N`-way support set.
pub fn fsl_logits(
    tape: &mut Tape,
    head: FslHead,
    support: Var,
    labels: &[usize],
    n_way: usize,
    query: Var,
) -> Result<Var> {
    let (s, q) = match head {
        FslHead::Proto => (support, query),
        FslHead::GraphProp => {
            let ns = tape.shape(support)[0];
            let nq = tape.shape(query)[0];
            let x = tape.concat(&[support, query])?;
            let xn = tape.l2_normalize_rows(x)?;
            let xt = tape.transpose(xn)?;
            let cos = tape.matmul(xn, xt)?;
            let pos = tape.relu(cos)?;
            let a = tape.row_normalize(pos)?;
            let ax = tape.matmul(a, x)?;
            let half_x = tape.scale(x, 0.5)?;
            let half_ax = tape.scale(ax, 0.5)?;
            let h = tape.add(half_x, half_ax)?;
            (tape.slice_rows(h, 0, ns)?, tape.slice_rows(h, ns, ns + nq)?)
        }
    };
    let protos = tape.group_mean(s, labels, n_way)?;
    tape.neg_sq_dist(q, protos)
}
