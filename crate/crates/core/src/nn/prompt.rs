use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{Array, Tensor};

use super::Ctx;

/// Instruction text whose token embeddings seed the soft prompt.
pub const INSTRUCTION: &str = "describe the stimulus:";

/// Learnable prefix prepended to every decoder input.
#[derive(Debug, Clone)]
pub struct SoftPrompt {
    pub prompt: ParamId,
    pub len: usize,
}

impl SoftPrompt {
    /// Copies rows of `token_table` for `instruction_ids`, repeated or
    /// truncated to `len` rows.
    pub fn from_instruction<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        token_table: &Array<T>,
        instruction_ids: &[usize],
        len: usize,
    ) -> Result<Self> {
        if instruction_ids.is_empty() || len == 0 {
            return Err(Error::invalid("soft prompt needs instruction tokens and len > 0"));
        }
        let dim = token_table.shape()[1];
        let mut data = Vec::with_capacity(len * dim);
        for &id in instruction_ids.iter().cycle().take(len) {
            if id >= token_table.shape()[0] {
                return Err(Error::invalid(format!("instruction token {id} outside vocabulary")));
            }
            data.extend_from_slice(token_table.row(id));
        }
        let prompt = ps.add(format!("{name}.prompt"), Array::new(vec![len, dim], data)?);
        Ok(Self { prompt, len })
    }

    pub fn tensor<'g, T: Scalar>(&self, cx: Ctx<'g, T>) -> Tensor<'g, T> {
        cx.p(self.prompt)
    }
}
