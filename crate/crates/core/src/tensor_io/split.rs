use super::{NamingScheme, Result, TensorIoError, TensorView};

/// Splits a fused QKV projection into its Q, K and V blocks.
///
/// Layouts by scheme:
/// - `Gpt2`: stored `[d_model, 3*d_model]`; blocks are contiguous column ranges.
/// - `Custom`: stored `[3*d_model, d_model]`; blocks are contiguous row ranges.
/// - `Pythia`: stored `[3*d_model, d_model]` with rows interleaved per head as
///   `(head, {q,k,v}, head_dim)`; `n_heads` must divide `d_model`.
///
/// The three outputs tile the input exactly.
pub fn split_fused_qkv(
    t: &TensorView,
    scheme: NamingScheme,
    d_model: usize,
    n_heads: usize,
) -> Result<[TensorView; 3]> {
    let fused = 3 * d_model;
    let names = ["Q", "K", "V"].map(|s| format!("{}[{s}]", t.name()));
    let mismatch = |axis: &str, got: usize| {
        TensorIoError::DimensionMismatch(format!(
            "{}: fused {axis} dimension is {got}, expected 3 x {d_model} = {fused}",
            t.name()
        ))
    };

    let blocks: [Vec<f64>; 3] = match scheme {
        NamingScheme::Gpt2 => {
            if t.cols() != fused {
                return Err(mismatch("column", t.cols()));
            }
            std::array::from_fn(|slot| {
                let mut out = Vec::with_capacity(t.rows() * d_model);
                for row in t.values().chunks_exact(t.cols()) {
                    out.extend_from_slice(&row[slot * d_model..(slot + 1) * d_model]);
                }
                out
            })
        }
        NamingScheme::Custom => {
            if t.rows() != fused {
                return Err(mismatch("row", t.rows()));
            }
            let block = d_model * t.cols();
            std::array::from_fn(|slot| t.values()[slot * block..(slot + 1) * block].to_vec())
        }
        NamingScheme::Pythia => {
            if t.rows() != fused {
                return Err(mismatch("row", t.rows()));
            }
            if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
                return Err(TensorIoError::DimensionMismatch(format!(
                    "{}: d_model {d_model} is not divisible by n_heads {n_heads}",
                    t.name()
                )));
            }
            let head_dim = d_model / n_heads;
            let cols = t.cols();
            std::array::from_fn(|slot| {
                let mut out = Vec::with_capacity(d_model * cols);
                for head in 0..n_heads {
                    let first = head * 3 * head_dim + slot * head_dim;
                    out.extend_from_slice(&t.values()[first * cols..(first + head_dim) * cols]);
                }
                out
            })
        }
    };

    let (rows, cols) = match scheme {
        NamingScheme::Gpt2 => (t.rows(), d_model),
        _ => (d_model, t.cols()),
    };
    let [q, k, v] = blocks;
    let [nq, nk, nv] = names;
    Ok([
        TensorView::new(nq, rows, cols, q, t.source_path())?,
        TensorView::new(nk, rows, cols, k, t.source_path())?,
        TensorView::new(nv, rows, cols, v, t.source_path())?,
    ])
}
