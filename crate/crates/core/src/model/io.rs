//! Weight container loading and saving in the HF GPT-2 tensor layout.
//!
//! Conv1D tensors are stored (in, out) on disk and transposed to (out, in)
//! on load; the fused `c_attn` projection is split into per-head Q/K/V. The
//! loader fetches the tensors it needs by name and ignores extras (HF
//! checkpoints carry attention-mask buffers that are not parameters).

use crate::container::{read_container, write_entries, Container};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{LayerWeights, Linear, LnParams, ModelConfig, ModelWeights, GPT2_LN_EPSILON};
use std::path::Path;

/// Loads a GPT-2-shaped container, inferring the configuration from tensor
/// shapes. The head count comes from `__metadata__.n_heads` when present and
/// defaults to d_model / 64 (the GPT-2 family convention).
pub fn load_weights(path: &Path) -> Result<ModelWeights> {
    let container = read_container(path)?;
    let names: Vec<String> = container.tensors.keys().cloned().collect();
    let prefix = if names.iter().any(|n| n.starts_with("transformer.")) {
        "transformer."
    } else {
        ""
    };
    let fetch = |name: &str| -> String { format!("{prefix}{name}") };

    let wte = container.tensor_matrix(&fetch("wte.weight"))?;
    let wpe = container.tensor_matrix(&fetch("wpe.weight"))?;
    let vocab_size = wte.rows();
    let d_model = wte.cols();
    let max_positions = wpe.rows();
    if wpe.cols() != d_model {
        return Err(Error::TensorShape {
            tensor: fetch("wpe.weight"),
            expected: vec![max_positions, d_model],
            got: vec![wpe.rows(), wpe.cols()],
        });
    }

    let mut n_layers = 0usize;
    while container.has(&fetch(&format!("h.{n_layers}.ln_1.weight"))) {
        n_layers += 1;
    }
    if n_layers == 0 {
        return Err(Error::MalformedContainer(
            "no transformer blocks found (missing h.0.ln_1.weight)".into(),
        ));
    }

    let c_fc0 = container.tensor(&fetch("h.0.mlp.c_fc.weight"))?;
    let d_mlp = match c_fc0.shape.as_slice() {
        [rows, cols] if *rows == d_model => *cols,
        other => {
            return Err(Error::TensorShape {
                tensor: fetch("h.0.mlp.c_fc.weight"),
                expected: vec![d_model, 0],
                got: other.to_vec(),
            })
        }
    };

    let n_heads = match container.metadata.get("n_heads") {
        Some(v) => v
            .parse::<usize>()
            .map_err(|_| Error::MalformedContainer(format!("bad n_heads metadata '{v}'")))?,
        None => {
            if d_model % 64 != 0 {
                return Err(Error::MalformedContainer(format!(
                    "cannot infer head count for d_model {d_model}; \
                     provide __metadata__.n_heads"
                )));
            }
            d_model / 64
        }
    };
    if n_heads == 0 || d_model % n_heads != 0 {
        return Err(Error::MalformedContainer(format!(
            "d_model {d_model} not divisible by n_heads {n_heads}"
        )));
    }

    let ln_epsilon = match container.metadata.get("ln_epsilon") {
        Some(v) => v
            .parse::<f64>()
            .map_err(|_| Error::MalformedContainer(format!("bad ln_epsilon metadata '{v}'")))?,
        None => GPT2_LN_EPSILON,
    };

    let mut config = ModelConfig::new(
        n_layers,
        d_model,
        n_heads,
        d_mlp,
        vocab_size,
        max_positions,
    );
    config.ln_epsilon_bits = ln_epsilon.to_bits();
    config.validate()?;

    let d_head = config.d_head;
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let name = |suffix: &str| fetch(&format!("h.{i}.{suffix}"));

        let ln1 = LnParams {
            gamma: container.tensor_vector(&name("ln_1.weight"))?,
            beta: container.tensor_vector(&name("ln_1.bias"))?,
        };
        let ln2 = LnParams {
            gamma: container.tensor_vector(&name("ln_2.weight"))?,
            beta: container.tensor_vector(&name("ln_2.bias"))?,
        };
        expect_len(&ln1.gamma, d_model, &name("ln_1.weight"))?;
        expect_len(&ln2.gamma, d_model, &name("ln_2.weight"))?;

        // Fused attention projection: (d_model, 3 d_model) on disk.
        let c_attn = expect_shape(
            container.tensor_matrix(&name("attn.c_attn.weight"))?,
            (d_model, 3 * d_model),
            &name("attn.c_attn.weight"),
        )?;
        let c_attn_bias = container.tensor_vector(&name("attn.c_attn.bias"))?;
        expect_len(&c_attn_bias, 3 * d_model, &name("attn.c_attn.bias"))?;
        let fused = c_attn.transpose(); // (3 d_model, d_model), rows Q|K|V

        let slice_heads = |block: usize| -> Vec<Linear> {
            (0..n_heads)
                .map(|h| {
                    let row0 = block * d_model + h * d_head;
                    let weight = Matrix::from_fn(d_head, d_model, |r, c| fused[(row0 + r, c)]);
                    let bias = c_attn_bias[row0..row0 + d_head].to_vec();
                    Linear { weight, bias }
                })
                .collect()
        };
        let q = slice_heads(0);
        let k = slice_heads(1);
        let v = slice_heads(2);

        let attn_proj = Linear {
            weight: expect_shape(
                container.tensor_matrix(&name("attn.c_proj.weight"))?,
                (d_model, d_model),
                &name("attn.c_proj.weight"),
            )?
            .transpose(),
            bias: container.tensor_vector(&name("attn.c_proj.bias"))?,
        };
        let mlp_fc = Linear {
            weight: expect_shape(
                container.tensor_matrix(&name("mlp.c_fc.weight"))?,
                (d_model, d_mlp),
                &name("mlp.c_fc.weight"),
            )?
            .transpose(),
            bias: container.tensor_vector(&name("mlp.c_fc.bias"))?,
        };
        let mlp_proj = Linear {
            weight: expect_shape(
                container.tensor_matrix(&name("mlp.c_proj.weight"))?,
                (d_mlp, d_model),
                &name("mlp.c_proj.weight"),
            )?
            .transpose(),
            bias: container.tensor_vector(&name("mlp.c_proj.bias"))?,
        };
        expect_len(&attn_proj.bias, d_model, &name("attn.c_proj.bias"))?;
        expect_len(&mlp_fc.bias, d_mlp, &name("mlp.c_fc.bias"))?;
        expect_len(&mlp_proj.bias, d_model, &name("mlp.c_proj.bias"))?;

        layers.push(LayerWeights {
            ln1,
            q,
            k,
            v,
            attn_proj,
            ln2,
            mlp_fc,
            mlp_proj,
        });
    }

    let ln_f = LnParams {
        gamma: container.tensor_vector(&fetch("ln_f.weight"))?,
        beta: container.tensor_vector(&fetch("ln_f.bias"))?,
    };
    expect_len(&ln_f.gamma, d_model, &fetch("ln_f.weight"))?;

    Ok(ModelWeights {
        config,
        wte,
        wpe,
        layers,
        ln_f,
    })
}

/// Writes the model in the HF GPT-2 layout (Conv1D orientation, fused
/// c_attn, F64 buffers). `load_weights` round-trips this bit-exactly.
pub fn save_weights(path: &Path, weights: &ModelWeights) -> Result<()> {
    let cfg = &weights.config;
    let d = cfg.d_model;
    let mut entries: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();

    let push_matrix = |entries: &mut Vec<(String, Vec<usize>, Vec<f64>)>, name: String, m: &Matrix| {
        entries.push((name, vec![m.rows(), m.cols()], m.data().to_vec()));
    };
    let push_vector = |entries: &mut Vec<(String, Vec<usize>, Vec<f64>)>, name: String, v: &[f64]| {
        entries.push((name, vec![v.len()], v.to_vec()));
    };

    push_matrix(&mut entries, "wte.weight".into(), &weights.wte);
    push_matrix(&mut entries, "wpe.weight".into(), &weights.wpe);

    for (i, layer) in weights.layers.iter().enumerate() {
        let name = |suffix: &str| format!("h.{i}.{suffix}");

        push_vector(&mut entries, name("ln_1.weight"), &layer.ln1.gamma);
        push_vector(&mut entries, name("ln_1.bias"), &layer.ln1.beta);
        push_vector(&mut entries, name("ln_2.weight"), &layer.ln2.gamma);
        push_vector(&mut entries, name("ln_2.bias"), &layer.ln2.beta);

        // Re-fuse per-head projections into (3 d_model, d_model), then store
        // transposed in the Conv1D orientation.
        let mut fused = Matrix::zeros(3 * d, d);
        let mut fused_bias = vec![0.0; 3 * d];
        for (block, heads) in [&layer.q, &layer.k, &layer.v].into_iter().enumerate() {
            for (h, lin) in heads.iter().enumerate() {
                let row0 = block * d + h * cfg.d_head;
                for r in 0..cfg.d_head {
                    fused.row_mut(row0 + r).copy_from_slice(lin.weight.row(r));
                    fused_bias[row0 + r] = lin.bias[r];
                }
            }
        }
        push_matrix(&mut entries, name("attn.c_attn.weight"), &fused.transpose());
        push_vector(&mut entries, name("attn.c_attn.bias"), &fused_bias);

        push_matrix(
            &mut entries,
            name("attn.c_proj.weight"),
            &layer.attn_proj.weight.transpose(),
        );
        push_vector(&mut entries, name("attn.c_proj.bias"), &layer.attn_proj.bias);
        push_matrix(
            &mut entries,
            name("mlp.c_fc.weight"),
            &layer.mlp_fc.weight.transpose(),
        );
        push_vector(&mut entries, name("mlp.c_fc.bias"), &layer.mlp_fc.bias);
        push_matrix(
            &mut entries,
            name("mlp.c_proj.weight"),
            &layer.mlp_proj.weight.transpose(),
        );
        push_vector(&mut entries, name("mlp.c_proj.bias"), &layer.mlp_proj.bias);
    }

    push_vector(&mut entries, "ln_f.weight".into(), &weights.ln_f.gamma);
    push_vector(&mut entries, "ln_f.bias".into(), &weights.ln_f.beta);

    let n_heads = cfg.n_heads.to_string();
    let ln_eps = cfg.ln_epsilon().to_string();
    write_entries(
        path,
        entries,
        &[("n_heads", n_heads.as_str()), ("ln_epsilon", ln_eps.as_str())],
    )
}

fn expect_shape(m: Matrix, expected: (usize, usize), tensor: &str) -> Result<Matrix> {
    if (m.rows(), m.cols()) != expected {
        return Err(Error::TensorShape {
            tensor: tensor.to_string(),
            expected: vec![expected.0, expected.1],
            got: vec![m.rows(), m.cols()],
        });
    }
    Ok(m)
}

fn expect_len(v: &[f64], expected: usize, tensor: &str) -> Result<()> {
    if v.len() != expected {
        return Err(Error::TensorShape {
            tensor: tensor.to_string(),
            expected: vec![expected],
            got: vec![v.len()],
        });
    }
    Ok(())
}

#[allow(dead_code)]
fn container_debug_names(c: &Container) -> Vec<&String> {
    c.tensors.keys().collect()
}
