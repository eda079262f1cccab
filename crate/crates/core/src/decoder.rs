//! Transformer decoder stack shared by the parallel decoder and the
//! autoregressive teacher; the two differ only in their self-attention
//! masks and input sequences.

use std::sync::Arc;

use easyfirst_tensor::{AttnSegment, Element, Tensor, Var};
use rand::Rng;

use crate::backbone::FeatureMap;
use crate::params::{ParamId, ParamStore, Session};
use crate::transformer::{
    positional_encoding, AttentionMask, DecoderUnit, Linear, ProjectedMemory, SeqLayout,
};
use crate::vocab::{NUM_CLASSES, NUM_INPUT_TOKENS};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct Decoder<T> {
    pub embedding: ParamId,
    pub units: Vec<DecoderUnit>,
    pub classifier: Linear,
    positional: Arc<Tensor<T>>,
}

/// Outputs of one decoder pass over a stacked batch.
#[derive(Debug, Clone, Copy)]
pub struct DecoderPass {
    /// Post-residual, post-norm FFN output of the last unit `[rows × d]`.
    pub ffn: Var,
    /// `[rows × 37]`
    pub logits: Var,
}

impl<T: Element> Decoder<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        heads: usize,
        d_ffn: usize,
        units: usize,
        max_len: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let embedding = store.add_xavier(
            format!("{name}.embedding"),
            vec![NUM_INPUT_TOKENS, d_model],
            NUM_INPUT_TOKENS,
            d_model,
            rng,
        );
        let units = (0..units)
            .map(|i| {
                DecoderUnit::new(
                    store,
                    &format!("{name}.unit{i}"),
                    d_model,
                    heads,
                    d_ffn,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let classifier = Linear::new(
            store,
            &format!("{name}.classifier"),
            d_model,
            NUM_CLASSES,
            rng,
        );
        // One extra row: the teacher's input is one longer than its labels.
        let positional = Arc::new(positional_encoding(max_len + 1, d_model)?);
        Ok(Decoder {
            embedding,
            units,
            classifier,
            positional,
        })
    }

    /// Cross-attention keys/values of the feature grid for every unit.
    pub fn project_memory(
        &self,
        s: &mut Session<T>,
        features: &FeatureMap<T>,
    ) -> Result<Vec<ProjectedMemory>> {
        self.units
            .iter()
            .map(|u| u.cross_attention.project_memory(s, features.grid))
            .collect()
    }

    /// Runs the stack over `tokens` (rows laid out by `layout`), with one
    /// self-attention mask per sequence. Sequence `i` cross-attends to
    /// feature grid `grids[i]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        s: &mut Session<T>,
        tokens: &[usize],
        layout: &SeqLayout,
        masks: &[AttentionMask],
        features: &FeatureMap<T>,
        grids: &[usize],
        memory: &[ProjectedMemory],
    ) -> Result<DecoderPass> {
        if masks.len() != layout.batch()
            || grids.len() != layout.batch()
            || tokens.len() != layout.total()
        {
            return Err(Error::config("decoder inputs disagree on batch layout"));
        }
        let table = s.param(self.embedding);
        let embedded = s.tape.embedding(table, tokens)?;
        let d = self.positional.cols();
        let mut pe = Vec::with_capacity(tokens.len() * d);
        for p in layout.positions() {
            pe.extend_from_slice(self.positional.row(p));
        }
        let pe = s
            .tape
            .constant(Tensor::from_vec(vec![tokens.len(), d], pe)?);
        let mut x = s.tape.add(embedded, pe)?;
        let self_segments: Vec<AttnSegment> = masks
            .iter()
            .zip(&layout.starts)
            .map(|(m, &start)| m.segment(start, start))
            .collect();
        let cross_segments: Vec<AttnSegment> = (0..layout.batch())
            .map(|i| features.segment(grids[i], layout.starts[i], layout.lens[i]))
            .collect();
        for (unit, mem) in self.units.iter().zip(memory) {
            x = unit.forward(s, x, &self_segments, *mem, &cross_segments)?;
        }
        let logits = self.classifier.forward(s, x)?;
        Ok(DecoderPass { ffn: x, logits })
    }
}
