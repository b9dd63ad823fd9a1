//! The two-block network: a per-task meta block producing a fixed-size
//! meta embedding, and a shared global block consuming that embedding
//! together with the remaining features.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::mlp::Mode;
use crate::numcore::{Activation, Graph, MlpSpec, ParamSet, ParamVars, Tensor, Var};

pub const META_PREFIX: &str = "meta.";
pub const GLOBAL_PREFIX: &str = "global.";
const TABLE: &str = "table";
const ROW: &str = "row";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetaBlockArch {
    Mlp { spec: MlpSpec },
    /// One trainable row per known task key; row 0 is shared by unseen keys.
    IdEmbedding { keys: Vec<String>, dim: usize },
}

impl MetaBlockArch {
    pub fn id_embedding(keys: impl IntoIterator<Item = String>, dim: usize) -> Self {
        let mut keys: Vec<String> = keys.into_iter().collect();
        keys.sort();
        keys.dedup();
        MetaBlockArch::IdEmbedding { keys, dim }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            MetaBlockArch::Mlp { spec } => spec.output_dim(),
            MetaBlockArch::IdEmbedding { dim, .. } => *dim,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Wiring {
    /// Meta features are also concatenated into the global block's input.
    pub meta_to_global: bool,
}

/// Architecture descriptor of a [`ModelBundle`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleArch {
    pub meta: MetaBlockArch,
    pub global: MlpSpec,
    pub embedding_dim: usize,
    pub meta_dim: usize,
    pub other_dim: usize,
    pub wiring: Wiring,
}

impl BundleArch {
    /// MLP meta block `meta_dim -> meta_hidden -> embedding_dim` and a
    /// sigmoid-output global block over `[embedding, (meta), other]`.
    pub fn mlp(
        meta_dim: usize,
        other_dim: usize,
        meta_hidden: &[usize],
        embedding_dim: usize,
        global_hidden: &[usize],
        activation: Activation,
        wiring: Wiring,
    ) -> Self {
        let global_in =
            embedding_dim + other_dim + if wiring.meta_to_global { meta_dim } else { 0 };
        Self {
            meta: MetaBlockArch::Mlp {
                spec: MlpSpec::encoder(meta_dim, meta_hidden, embedding_dim, activation),
            },
            global: MlpSpec::classifier(global_in, global_hidden, activation),
            embedding_dim,
            meta_dim,
            other_dim,
            wiring,
        }
    }

    pub fn global_input_dim(&self) -> usize {
        self.embedding_dim
            + self.other_dim
            + if self.wiring.meta_to_global {
                self.meta_dim
            } else {
                0
            }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::Architecture("embedding dim must be at least 1".into()));
        }
        match &self.meta {
            MetaBlockArch::Mlp { spec } => {
                spec.validate()?;
                if spec.input_dim != self.meta_dim {
                    return Err(Error::Architecture(format!(
                        "meta block input {} != meta feature dim {}",
                        spec.input_dim, self.meta_dim
                    )));
                }
            }
            MetaBlockArch::IdEmbedding { keys, .. } => {
                if keys.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Architecture("id-embedding keys must be sorted and unique".into()));
                }
            }
        }
        if self.meta.output_dim() != self.embedding_dim {
            return Err(Error::Architecture(format!(
                "meta block output {} != embedding dim {}",
                self.meta.output_dim(),
                self.embedding_dim
            )));
        }
        self.global.validate()?;
        if self.global.input_dim != self.global_input_dim() {
            return Err(Error::Architecture(format!(
                "global block input {} != {} (embedding + other{})",
                self.global.input_dim,
                self.global_input_dim(),
                if self.wiring.meta_to_global { " + meta" } else { "" }
            )));
        }
        if self.global.output_dim() != 1 {
            return Err(Error::Architecture("global block must output one probability".into()));
        }
        Ok(())
    }

    /// Row of the id-embedding table used by `key` (0 for unseen keys).
    pub fn id_row(&self, key: &str) -> Option<usize> {
        match &self.meta {
            MetaBlockArch::IdEmbedding { keys, .. } => {
                Some(keys.binary_search_by(|k| k.as_str().cmp(key)).map_or(0, |i| i + 1))
            }
            MetaBlockArch::Mlp { .. } => None,
        }
    }

    pub fn init_meta(&self, rng: &mut impl Rng) -> ParamSet {
        match &self.meta {
            MetaBlockArch::Mlp { spec } => spec.init_params(rng),
            MetaBlockArch::IdEmbedding { keys, dim } => {
                let rows = keys.len() + 1;
                let limit = (6.0 / (1 + dim) as f64).sqrt();
                let data = (0..rows * dim).map(|_| rng.gen_range(-limit..=limit)).collect();
                let mut p = ParamSet::new();
                p.insert(TABLE, Tensor::from_vec(rows, *dim, data).expect("sized"))
                    .expect("finite");
                p
            }
        }
    }

    pub fn check_meta(&self, meta: &ParamSet) -> Result<()> {
        match &self.meta {
            MetaBlockArch::Mlp { spec } => spec.check_params(meta),
            MetaBlockArch::IdEmbedding { keys, dim } => match meta.get(TABLE) {
                Some(t) if t.shape() == (keys.len() + 1, *dim) && meta.len() == 1 => Ok(()),
                Some(t) => Err(Error::LayerShape {
                    layer: 0,
                    expected: format!("table {}x{}", keys.len() + 1, dim),
                    got: format!("{}x{}", t.rows(), t.cols()),
                }),
                None => Err(Error::LayerShape {
                    layer: 0,
                    expected: "table".into(),
                    got: "missing".into(),
                }),
            },
        }
    }

    /// Meta parameters a single task adapts: the whole MLP, or its own row.
    pub fn task_meta(&self, meta: &ParamSet, key: &str) -> ParamSet {
        match self.id_row(key) {
            None => meta.clone(),
            Some(r) => {
                let table = meta.get(TABLE).expect("checked table");
                let mut p = ParamSet::new();
                p.insert(ROW, Tensor::row(table.row_slice(r).to_vec()))
                    .expect("finite");
                p
            }
        }
    }

    /// Writes task-local meta parameters (or gradients) into a full-shaped
    /// set whose other entries come from `base`.
    pub fn scatter_task_meta(&self, base: &ParamSet, key: &str, local: &ParamSet) -> ParamSet {
        match self.id_row(key) {
            None => local.clone(),
            Some(r) => {
                let mut out = base.clone();
                let row = local.get(ROW).expect("task row");
                for (name, t) in out.entries_mut() {
                    if name == TABLE {
                        let cols = t.cols();
                        t.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(row.data());
                    }
                }
                out
            }
        }
    }

    /// Meta embeddings (`m x embedding_dim`) for `m` rows of meta features.
    pub fn meta_embed_graph(
        &self,
        g: &mut Graph,
        local: &ParamVars,
        meta_x: Var,
        mode: Mode,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        match &self.meta {
            MetaBlockArch::Mlp { spec } => spec.forward_graph(g, local, meta_x, mode, rng),
            MetaBlockArch::IdEmbedding { .. } => {
                let row = local
                    .get(ROW)
                    .ok_or_else(|| Error::Architecture("missing task row".into()))?;
                let m = g.shape(meta_x).0;
                Ok(g.broadcast_rows(row, m))
            }
        }
    }

    pub fn meta_embed_infer(&self, local: &ParamSet, meta_x: &Tensor) -> Result<Tensor> {
        match &self.meta {
            MetaBlockArch::Mlp { spec } => spec.infer(local, meta_x),
            MetaBlockArch::IdEmbedding { .. } => Ok(local
                .get(ROW)
                .ok_or_else(|| Error::Architecture("missing task row".into()))?
                .broadcast_rows(meta_x.rows())),
        }
    }

    /// Global block input `[embedding, (meta), other]` inside a graph.
    pub fn global_input_graph(&self, g: &mut Graph, emb: Var, meta_x: Var, other_x: Var) -> Var {
        if self.wiring.meta_to_global {
            g.concat_cols(&[emb, meta_x, other_x])
        } else {
            g.concat_cols(&[emb, other_x])
        }
    }

    /// Probabilities from the global block; the one forward path shared by
    /// evaluation and online scoring.
    pub fn global_probabilities(
        &self,
        global: &ParamSet,
        embeddings: &Tensor,
        meta_x: &Tensor,
        other_x: &Tensor,
    ) -> Result<Vec<f64>> {
        let input = if self.wiring.meta_to_global {
            Tensor::concat_cols(&[embeddings, meta_x, other_x])
        } else {
            Tensor::concat_cols(&[embeddings, other_x])
        };
        Ok(self.global.infer(global, &input)?.into_data())
    }
}

/// Architecture plus parameters of both blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub arch: BundleArch,
    pub meta: ParamSet,
    pub global: ParamSet,
}

impl ModelBundle {
    pub fn init(arch: BundleArch, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let meta = arch.init_meta(rng);
        let global = arch.global.init_params(rng);
        Ok(Self { arch, meta, global })
    }

    pub fn new(arch: BundleArch, meta: ParamSet, global: ParamSet) -> Result<Self> {
        arch.validate()?;
        arch.check_meta(&meta)?;
        arch.global.check_params(&global)?;
        Ok(Self { arch, meta, global })
    }

    pub fn embedding_dim(&self) -> usize {
        self.arch.embedding_dim
    }

    /// Both blocks as one set, names prefixed `meta.` / `global.`.
    pub fn joint_params(&self) -> ParamSet {
        self.meta
            .prefixed(META_PREFIX)
            .merged(&self.global.prefixed(GLOBAL_PREFIX))
            .expect("disjoint prefixes")
    }

    pub fn with_joint_params(&self, joint: &ParamSet) -> Result<Self> {
        Self::new(
            self.arch.clone(),
            joint.strip_prefix(META_PREFIX),
            joint.strip_prefix(GLOBAL_PREFIX),
        )
    }

    pub fn task_meta(&self, key: &str) -> ParamSet {
        self.arch.task_meta(&self.meta, key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn global_width_matches_wiring() {
        let a = BundleArch::mlp(3, 2, &[4], 5, &[6], Activation::Relu, Wiring::default());
        a.validate().unwrap();
        assert_eq!(a.global.input_dim, 7);
        let b = BundleArch::mlp(
            3,
            2,
            &[4],
            5,
            &[6],
            Activation::Relu,
            Wiring {
                meta_to_global: true,
            },
        );
        b.validate().unwrap();
        assert_eq!(b.global.input_dim, 10);
    }

    #[test]
    fn mismatched_global_rejected() {
        let mut a = BundleArch::mlp(3, 2, &[4], 5, &[6], Activation::Relu, Wiring::default());
        a.global = MlpSpec::classifier(8, &[6], Activation::Relu);
        assert!(matches!(a.validate(), Err(Error::Architecture(_))));
    }

    #[test]
    fn id_rows_and_default() {
        let arch = BundleArch {
            meta: MetaBlockArch::id_embedding(vec!["b".into(), "a".into()], 3),
            global: MlpSpec::classifier(4, &[], Activation::Relu),
            embedding_dim: 3,
            meta_dim: 2,
            other_dim: 1,
            wiring: Wiring::default(),
        };
        assert_eq!(arch.id_row("a"), Some(1));
        assert_eq!(arch.id_row("b"), Some(2));
        assert_eq!(arch.id_row("zzz"), Some(0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bundle = ModelBundle::init(arch, &mut rng).unwrap();
        let local = bundle.task_meta("b");
        let table = bundle.meta.get("table").unwrap();
        assert_eq!(local.get("row").unwrap().data(), table.row_slice(2));
    }

    #[test]
    fn joint_roundtrip() {
        let a = BundleArch::mlp(3, 2, &[4], 5, &[6], Activation::Tanh, Wiring::default());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = ModelBundle::init(a, &mut rng).unwrap();
        let back = b.with_joint_params(&b.joint_params()).unwrap();
        assert_eq!(back, b);
    }
}
