use super::ArchSpec;

pub(crate) const NO_ROW: u32 = u32::MAX;

/// Rows evaluated by one residual block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct LayerPlan {
    /// Time positions of the block's input rows, ascending.
    pub in_pos: Vec<usize>,
    /// Time positions where the gated unit is evaluated, ascending. These are
    /// also the positions of the block's output rows.
    pub out_pos: Vec<usize>,
    /// `taps[r * k + j]`: input row read by kernel tap `j` for output row `r`
    /// (tap `k - 1` is the current position), or `NO_ROW` for causal padding.
    pub taps: Vec<u32>,
    /// Output rows holding the requested output positions.
    pub skip_rows: Vec<usize>,
}

/// Which time positions each layer must evaluate so that the requested outputs
/// are exact. Depends only on the architecture, input length and outputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plan {
    pub(crate) input_len: usize,
    pub(crate) outputs: Vec<usize>,
    pub(crate) layers: Vec<LayerPlan>,
}

impl Plan {
    /// Outputs at the given positions (deduplicated, sorted).
    pub fn new(arch: &ArchSpec, input_len: usize, outputs: &[usize]) -> Self {
        let mut outs: Vec<usize> = outputs.iter().copied().filter(|&p| p < input_len).collect();
        outs.sort_unstable();
        outs.dedup();
        let k = arch.kernel_size;
        let mut layers = Vec::with_capacity(arch.n_layers);
        let mut out_pos = outs.clone();
        for l in (0..arch.n_layers).rev() {
            let d = arch.dilation(l);
            let mut in_pos: Vec<usize> = Vec::with_capacity(out_pos.len() * k);
            for &p in &out_pos {
                for j in 0..k {
                    let back = (k - 1 - j) * d;
                    if p >= back {
                        in_pos.push(p - back);
                    }
                }
            }
            in_pos.sort_unstable();
            in_pos.dedup();
            let mut taps = Vec::with_capacity(out_pos.len() * k);
            for &p in &out_pos {
                for j in 0..k {
                    let back = (k - 1 - j) * d;
                    let row = if p >= back {
                        in_pos
                            .binary_search(&(p - back))
                            .expect("tap position planned") as u32
                    } else {
                        NO_ROW
                    };
                    taps.push(row);
                }
            }
            let skip_rows = outs
                .iter()
                .map(|p| out_pos.binary_search(p).expect("output position planned"))
                .collect();
            let next_out = in_pos.clone();
            layers.push(LayerPlan {
                in_pos,
                out_pos,
                taps,
                skip_rows,
            });
            out_pos = next_out;
        }
        layers.reverse();
        Plan {
            input_len,
            outputs: outs,
            layers,
        }
    }

    /// The single output at the last position, as used for epoch classification.
    pub fn last(arch: &ArchSpec, input_len: usize) -> Self {
        Plan::new(arch, input_len, &[input_len.saturating_sub(1)])
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn outputs(&self) -> &[usize] {
        &self.outputs
    }

    /// Input samples the outputs depend on.
    pub fn input_positions(&self) -> &[usize] {
        self.layers.first().map_or(&[], |l| &l.in_pos)
    }

    /// Total gated-unit evaluations across layers.
    pub fn cost(&self) -> usize {
        self.layers.iter().map(|l| l.out_pos.len()).sum()
    }
}
