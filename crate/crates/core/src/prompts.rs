//! Deep key/value text prompts for every encoder layer.
//!
//! All prompts live in one `[2·C·D, N]` table whose rows are ordered
//! `[key/value][layer][feature]`, so rows `(kv·C + l)·D ..` hold layer `l`'s
//! keys (`kv = 0`) or values (`kv = 1`). The table is either trained directly
//! or generated as `W · P_in` from a short input sequence `P_in: [D', N]`
//! through a shared `W: [2·C·D, D']`. Folding evaluates that product once and
//! discards both factors.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::PromptPair;
use crate::params::{Ctx, Group, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Empty,
    Direct,
    Reparam,
    Folded,
}

#[derive(Clone, Debug)]
enum Storage {
    Empty,
    Table(ParamId),
    Reparam { input: ParamId, proj: ParamId },
}

#[derive(Clone, Debug)]
pub struct TextPromptSet {
    pub layers: usize,
    pub dim: usize,
    pub count: usize,
    mode: PromptMode,
    storage: Storage,
}

impl TextPromptSet {
    /// `count == 0` yields an empty set regardless of `reparam_dim`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        layers: usize,
        dim: usize,
        count: usize,
        reparam_dim: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let rows = 2 * layers * dim;
        let (mode, storage) = match (count, reparam_dim) {
            (0, _) => (PromptMode::Empty, Storage::Empty),
            (_, None) => {
                let t = store.add("prompts.table", Group::Prompt, Tensor::randn(&[rows, count], PROMPT_INIT_STD, rng));
                (PromptMode::Direct, Storage::Table(t))
            }
            (_, Some(0)) => return Err(Error::Config("reparametrization width must be positive".into())),
            (_, Some(dp)) => {
                let input = store.add("prompts.input", Group::Prompt, Tensor::randn(&[dp, count], PROMPT_INIT_STD, rng));
                let proj = store.add(
                    "prompts.proj",
                    Group::Prompt,
                    Tensor::randn(&[rows, dp], 1.0 / (dp as f64).sqrt(), rng),
                );
                (PromptMode::Reparam, Storage::Reparam { input, proj })
            }
        };
        Ok(TextPromptSet { layers, dim, count, mode, storage })
    }

    /// Wraps an existing folded table (e.g. one read from a checkpoint).
    pub fn from_folded(store: &mut ParamStore, layers: usize, dim: usize, table: Tensor) -> Result<Self> {
        if table.shape().len() != 2 || table.rows() != 2 * layers * dim {
            return Err(Error::shape("folded prompt table", table.shape(), &[2 * layers * dim]));
        }
        let count = table.cols();
        let id = store.add("prompts.table", Group::Prompt, table);
        Ok(TextPromptSet {
            layers,
            dim,
            count,
            mode: PromptMode::Folded,
            storage: Storage::Table(id),
        })
    }

    pub fn mode(&self) -> PromptMode {
        self.mode
    }

    /// Parameters the optimizer sees for this set.
    pub fn param_ids(&self) -> Vec<ParamId> {
        match self.storage {
            Storage::Empty => Vec::new(),
            Storage::Table(t) => vec![t],
            Storage::Reparam { input, proj } => vec![input, proj],
        }
    }

    /// The `[2CD, N]` prompt table as a tape variable.
    pub fn table(&self, cx: &mut Ctx) -> Result<Option<Var>> {
        match self.storage {
            Storage::Empty => Ok(None),
            Storage::Table(t) => cx.param(t).map(Some),
            Storage::Reparam { input, proj } => {
                let p = cx.param(input)?;
                let w = cx.param(proj)?;
                cx.tape.matmul(w, p).map(Some)
            }
        }
    }

    /// Current table values without a tape.
    pub fn table_value(&self, store: &ParamStore) -> Result<Option<Tensor>> {
        match self.storage {
            Storage::Empty => Ok(None),
            Storage::Table(t) => Ok(Some(store.get(t)?.value.clone())),
            Storage::Reparam { input, proj } => {
                let p = &store.get(input)?.value;
                let w = &store.get(proj)?.value;
                w.matmul(p).map(Some)
            }
        }
    }

    /// Per-layer prompt pairs; empty when the set has no prompts.
    pub fn materialize(&self, cx: &mut Ctx, dropout: f64) -> Result<Vec<PromptPair>> {
        let Some(table) = self.table(cx)? else {
            return Ok(Vec::new());
        };
        let table = cx.dropout(table, dropout)?;
        let (c, d) = (self.layers, self.dim);
        (0..c)
            .map(|l| {
                Ok(PromptPair {
                    keys: cx.tape.slice(table, 0, l * d, d)?,
                    values: cx.tape.slice(table, 0, (c + l) * d, d)?,
                })
            })
            .collect()
    }

    /// Replaces `(P_in, W)` with their product and discards both factors.
    pub fn fold(&mut self, store: &mut ParamStore) -> Result<()> {
        let Storage::Reparam { input, proj } = self.storage else {
            return Err(Error::State(format!("cannot fold a {:?} prompt set", self.mode)));
        };
        let table = self.table_value(store)?.expect("reparam set has a table");
        store.discard(input);
        store.discard(proj);
        self.storage = Storage::Table(store.add("prompts.table", Group::Prompt, table));
        self.mode = PromptMode::Folded;
        Ok(())
    }

    /// Switches a table-backed set to the reparametrized form for a new run:
    /// draws a fresh `P_in: [D', N]` and solves `W = table · pinv(P_in)`,
    /// which reproduces the table exactly when `D' ≥ N`.
    pub fn reparametrize<R: Rng + ?Sized>(&mut self, store: &mut ParamStore, reparam_dim: usize, rng: &mut R) -> Result<()> {
        let Storage::Table(t) = self.storage else {
            return Err(Error::State(format!("cannot reparametrize a {:?} prompt set", self.mode)));
        };
        if reparam_dim < self.count {
            return Err(Error::Config(format!(
                "reparametrization width {reparam_dim} is below the prompt count {}; the table could not be reproduced",
                self.count
            )));
        }
        let table = store.get(t)?.value.clone();
        let input = Tensor::randn(&[reparam_dim, self.count], PROMPT_INIT_STD, rng);
        let p = DMatrix::from_row_slice(reparam_dim, self.count, input.data());
        let pinv = p
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::Evaluation(format!("pseudo-inverse failed: {e}")))?;
        let t_mat = DMatrix::from_row_slice(table.rows(), self.count, table.data());
        let w = t_mat * pinv;
        let w_data: Vec<f64> = (0..w.nrows()).flat_map(|r| (0..w.ncols()).map(move |c| (r, c))).map(|(r, c)| w[(r, c)]).collect();
        let proj = Tensor::new(&[table.rows(), reparam_dim], w_data)?;
        store.discard(t);
        let input = store.add("prompts.input", Group::Prompt, input);
        let proj = store.add("prompts.proj", Group::Prompt, proj);
        self.storage = Storage::Reparam { input, proj };
        self.mode = PromptMode::Reparam;
        Ok(())
    }
}

/// Prompt entries in folded form: text prompts `2·C·D·N` plus visual prompts `D·M`.
pub fn prompt_param_count(layers: usize, dim: usize, text_prompts: usize, visual_prompts: usize) -> usize {
    2 * layers * dim * text_prompts + dim * visual_prompts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn pairs(store: &ParamStore, set: &TextPromptSet) -> Vec<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let mut cx = Ctx::eval(&mut tape, store);
        let p = set.materialize(&mut cx, 0.0).unwrap();
        p.into_iter()
            .map(|p| (tape.value(p.keys).clone(), tape.value(p.values).clone()))
            .collect()
    }

    #[test]
    fn direct_mode_shapes_and_row_order() {
        let mut store = ParamStore::new();
        let set = TextPromptSet::new(&mut store, 2, 4, 3, None, &mut rng(1)).unwrap();
        let p = pairs(&store, &set);
        assert_eq!(p.len(), 2);
        let table = set.table_value(&store).unwrap().unwrap();
        for (l, (k, v)) in p.iter().enumerate() {
            assert_eq!(k.shape(), &[4, 3]);
            assert!(k.bitwise_eq(&table.slice_rows(l * 4, 4).unwrap()));
            assert!(v.bitwise_eq(&table.slice_rows((2 + l) * 4, 4).unwrap()));
        }
    }

    #[test]
    fn fold_preserves_prompts_and_discards_factors() {
        let mut store = ParamStore::new();
        let mut set = TextPromptSet::new(&mut store, 3, 4, 2, Some(5), &mut rng(2)).unwrap();
        let before = pairs(&store, &set);
        let factors = set.param_ids();
        set.fold(&mut store).unwrap();
        assert_eq!(set.mode(), PromptMode::Folded);
        for id in factors {
            assert!(matches!(store.get(id), Err(Error::State(_))));
        }
        let after = pairs(&store, &set);
        for ((k0, v0), (k1, v1)) in before.iter().zip(&after) {
            assert!(k0.max_abs_diff(k1) <= 1e-12 && v0.max_abs_diff(v1) <= 1e-12);
        }
        assert_eq!(store.count(Group::Prompt), 2 * 3 * 4 * 2);
        assert!(matches!(set.fold(&mut store), Err(Error::State(_))));
    }

    #[test]
    fn direct_and_empty_sets_cannot_fold() {
        let mut store = ParamStore::new();
        let mut direct = TextPromptSet::new(&mut store, 1, 2, 1, None, &mut rng(3)).unwrap();
        assert!(matches!(direct.fold(&mut store), Err(Error::State(_))));
        let mut empty = TextPromptSet::new(&mut store, 1, 2, 0, Some(4), &mut rng(3)).unwrap();
        assert_eq!(empty.mode(), PromptMode::Empty);
        assert!(pairs(&store, &empty).is_empty());
        assert!(matches!(empty.fold(&mut store), Err(Error::State(_))));
    }

    #[test]
    fn reparametrize_reproduces_table() {
        let mut store = ParamStore::new();
        let mut set = TextPromptSet::new(&mut store, 2, 4, 3, None, &mut rng(4)).unwrap();
        let before = set.table_value(&store).unwrap().unwrap();
        set.reparametrize(&mut store, 5, &mut rng(5)).unwrap();
        assert_eq!(set.mode(), PromptMode::Reparam);
        let after = set.table_value(&store).unwrap().unwrap();
        assert!(before.max_abs_diff(&after) < 1e-10);
        assert!(matches!(set.reparametrize(&mut store, 5, &mut rng(5)), Err(Error::State(_))));

        let mut narrow = TextPromptSet::new(&mut store, 2, 4, 3, None, &mut rng(6)).unwrap();
        assert!(matches!(narrow.reparametrize(&mut store, 2, &mut rng(7)), Err(Error::Config(_))));
    }

    #[test]
    fn prompt_counts() {
        assert_eq!(prompt_param_count(24, 1536, 10, 10), 752_640);
        assert_eq!(2 * 24 * 1536 * 10, 737_280);
        assert_eq!(prompt_param_count(24, 1536, 0, 0), 0);
        assert_eq!(prompt_param_count(1, 2, 1, 1), 6);
    }
}
