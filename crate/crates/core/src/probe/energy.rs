use cost_tensor::{kernels, Tensor};

use crate::error::{Error, Result};
use crate::model::HiddenState;

/// Per-token L2 norms of block outputs, re-spatialized to the token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyMap {
    pub step: usize,
    pub layers: Vec<usize>,
    /// `(layers, f, h, w)`, all entries non-negative.
    pub values: Tensor<f32>,
}

/// Energy maps of batch index 0 for every captured layer of one step, in
/// ascending layer order.
pub fn energy_map(states: &[HiddenState], step: usize) -> Result<EnergyMap> {
    let mut chosen: Vec<&HiddenState> = states.iter().filter(|s| s.step == step).collect();
    chosen.sort_by_key(|s| s.layer);
    let first = chosen
        .first()
        .ok_or_else(|| Error::Analysis(format!("no hidden states captured at step {step}")))?;
    let grid = first.grid;
    let mut data = Vec::new();
    for st in &chosen {
        if st.grid != grid {
            return Err(Error::Analysis("captured grids differ across layers".into()));
        }
        let sp = st.spatial()?;
        let s = sp.shape();
        let per = s[1..].iter().product::<usize>();
        let first_item = Tensor::new(s[1..].to_vec(), sp.data()[..per].to_vec())?;
        data.extend_from_slice(kernels::reduce_l2(&first_item, 3)?.data());
    }
    let [f, h, w] = grid;
    Ok(EnergyMap {
        step,
        layers: chosen.iter().map(|s| s.layer).collect(),
        values: Tensor::new([chosen.len(), f, h, w], data)?,
    })
}

impl EnergyMap {
    /// One layer's map flattened to `(f·h, w)` for heatmap output.
    pub fn panel(&self, index: usize) -> Result<Tensor<f32>> {
        let s = self.values.shape();
        if index >= s[0] {
            return Err(Error::Analysis(format!("layer index {index} outside {} maps", s[0])));
        }
        let per = s[1] * s[2] * s[3];
        Ok(Tensor::new([s[1] * s[2], s[3]], self.values.data()[index * per..(index + 1) * per].to_vec())?)
    }
}
