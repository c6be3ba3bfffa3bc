//! Splits each sublayer's output into per-neuron contributions and checks
//! that they add back up to what the forward pass produced.

use pktlab::model::{attn_value_output_sum, ffn_neuron_sum, forward, ModelConfig, TransformerParams};

fn main() -> pktlab::Result<()> {
    let cfg = ModelConfig { layers: 2, d_model: 16, n_ffn: 32, heads: 4, vocab: 20, max_len: 8, seed: 11 };
    let params = TransformerParams::<f64>::init(cfg)?;
    let prompt = [3, 7, 1, 12, 5];
    let trace = forward(&params, &prompt, true)?.trace.expect("trace requested");

    for layer in 0..cfg.layers {
        let lt = trace.layer(layer, 0)?;
        for pos in 0..prompt.len() {
            let ffn = ffn_neuron_sum(&params, &trace, layer, pos)?;
            let attn = attn_value_output_sum(&params, &trace, layer, pos)?;
            let gap =
                |sum: &[f64], direct: &[f64]| sum.iter().zip(direct).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            println!(
                "layer {layer} pos {pos}: ffn gap {:.1e}, attention gap {:.1e}",
                gap(&ffn, lt.ffn_out.row(pos)),
                gap(&attn, lt.attn_out.row(pos))
            );
        }
    }
    Ok(())
}
