//! Continual backpropagation, simplified: FFN hidden units that are old
//! enough and contribute least are reinitialized at a small rate.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CbpScope {
    FirstBlock,
    AllBlocks,
}

fn default_decay() -> f64 {
    0.99
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CbpConfig {
    pub maturity_threshold: u64,
    /// Replacements per eligible unit per step.
    pub replacement_rate: f64,
    pub scope: CbpScope,
    #[serde(default = "default_decay")]
    pub utility_decay: f64,
}

impl Default for CbpConfig {
    fn default() -> Self {
        Self {
            maturity_threshold: 400,
            replacement_rate: 1e-4,
            scope: CbpScope::AllBlocks,
            utility_decay: default_decay(),
        }
    }
}

impl CbpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.replacement_rate) {
            return Err(Error::Config("replacement_rate must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.utility_decay) {
            return Err(Error::Config("utility_decay must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Age and utility of every hidden unit of one FFN layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLedger {
    pub block: usize,
    pub age: Vec<u64>,
    pub utility: Vec<f64>,
    /// Fractional replacement owed from earlier steps.
    pub carry: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitLedger {
    pub layers: Vec<LayerLedger>,
    pub replacements: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Replacement {
    pub block: usize,
    pub unit: usize,
}

impl UnitLedger {
    pub fn new(model: &Model, config: &CbpConfig) -> Result<Self> {
        let vit = model
            .as_vit()
            .ok_or_else(|| Error::Config("CBP needs a ViT model with FFN blocks".into()))?;
        let blocks = match config.scope {
            CbpScope::FirstBlock => 1,
            CbpScope::AllBlocks => vit.config.blocks,
        };
        let h = vit.config.ffn_hidden;
        Ok(Self {
            layers: (0..blocks)
                .map(|block| LayerLedger {
                    block,
                    age: vec![0; h],
                    utility: vec![0.0; h],
                    carry: 0.0,
                })
                .collect(),
            replacements: 0,
        })
    }
}

/// Units to replace this step: the `floor(rate * eligible + carry)` lowest
/// utility units among those with `age >= threshold`, ties to the lowest
/// index. Updates `carry` with the fractional remainder.
pub fn select_replacements(age: &[u64], utility: &[f64], threshold: u64, rate: f64, carry: &mut f64) -> Vec<usize> {
    let mut eligible: Vec<usize> = (0..age.len()).filter(|&i| age[i] >= threshold).collect();
    let owed = rate * eligible.len() as f64 + *carry;
    let n = (owed.floor() as usize).min(eligible.len());
    *carry = owed - n as f64;
    if n == 0 {
        return Vec::new();
    }
    eligible.sort_by(|&a, &b| utility[a].total_cmp(&utility[b]).then(a.cmp(&b)));
    eligible.truncate(n);
    eligible.sort_unstable();
    eligible
}

/// One CBP step after an optimizer step. `hidden` holds the post-activation
/// fc1 outputs of every block on the current training batch.
pub fn cbp_step(
    model: &mut Model,
    ledger: &mut UnitLedger,
    config: &CbpConfig,
    hidden: &[Tensor],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Replacement>> {
    let mut out = Vec::new();
    for layer in &mut ledger.layers {
        let b = layer.block;
        let acts = hidden
            .get(b)
            .ok_or_else(|| Error::Lookup(format!("fc1 activations of block {b}")))?;
        let (rows, h) = acts.rows_cols();
        if h != layer.age.len() {
            return Err(Error::shape("cbp activations", &[layer.age.len()], &[h]));
        }
        let fc2 = model.params().get(&format!("block{b}.ffn.fc2"))?;
        let d = fc2.tensor.shape()[1];
        let mut mean_abs = vec![0.0; h];
        for row in acts.data().chunks(h) {
            for (m, a) in mean_abs.iter_mut().zip(row) {
                *m += a.abs();
            }
        }
        for (j, m) in mean_abs.iter().enumerate() {
            let out_l1: f64 = fc2.tensor.data()[j * d..(j + 1) * d].iter().map(|w| w.abs()).sum();
            let u = m / rows.max(1) as f64 * out_l1;
            layer.utility[j] = config.utility_decay * layer.utility[j] + (1.0 - config.utility_decay) * u;
            layer.age[j] += 1;
        }
        let chosen = select_replacements(
            &layer.age,
            &layer.utility,
            config.maturity_threshold,
            config.replacement_rate,
            &mut layer.carry,
        );
        for &j in &chosen {
            reinit_unit(model, b, j, rng)?;
            layer.age[j] = 0;
            layer.utility[j] = 0.0;
            out.push(Replacement { block: b, unit: j });
        }
    }
    ledger.replacements += out.len() as u64;
    Ok(out)
}

/// Fresh incoming weights and zero bias for hidden unit `j`; its outgoing
/// row is zeroed so the network output is unchanged.
pub fn reinit_unit(model: &mut Model, block: usize, j: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    let p = model.params_mut();
    let fc1 = p.get_mut(&format!("block{block}.ffn.fc1"))?;
    let (rows, h) = (fc1.tensor.shape()[0], fc1.tensor.shape()[1]);
    if j >= h {
        return Err(Error::InvalidInput(format!("unit {j} out of range for {h} hidden units")));
    }
    let init = fc1.init;
    for r in 0..rows {
        fc1.tensor.data_mut()[r * h + j] = init.sample(rng);
    }
    p.get_mut(&format!("block{block}.ffn.fc1.bias"))?.tensor.data_mut()[j] = 0.0;
    zero_outgoing(model, block, j)
}

pub fn zero_outgoing(model: &mut Model, block: usize, j: usize) -> Result<()> {
    let fc2 = model.params_mut().get_mut(&format!("block{block}.ffn.fc2"))?;
    let d = fc2.tensor.shape()[1];
    fc2.tensor.data_mut()[j * d..(j + 1) * d].iter_mut().for_each(|w| *w = 0.0);
    Ok(())
}
