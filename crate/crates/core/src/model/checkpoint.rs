//! Versioned binary checkpoints: magic "BVCK", a config echo, then named
//! float32 parameter blocks.

use std::path::Path;

use super::{ModelConfig, Scalar, ToyBackboneParams, BLOCK_NAMES};
use crate::error::{Error, Result};
use crate::io;

const MAGIC: &[u8; 4] = b"BVCK";
const VERSION: u32 = 1;

fn config_echo(config: &ModelConfig, extra: &str) -> String {
    let mut echo = format!(
        "view_resolution {}\npatch {}\nfeature_dim {}\nvocab {}\naux_hidden {}\ninput_channels {}\n",
        config.view_resolution,
        config.patch,
        config.feature_dim,
        config.vocab,
        config.aux_hidden,
        config.input_channels
    );
    if !extra.is_empty() {
        echo.push_str(extra);
        if !extra.ends_with('\n') {
            echo.push('\n');
        }
    }
    echo
}

fn parse_echo(echo: &str, path: &Path) -> Result<ModelConfig> {
    let get = |key: &str| -> Result<usize> {
        echo.lines()
            .find_map(|l| l.strip_prefix(key).and_then(|rest| rest.trim().parse().ok()))
            .ok_or_else(|| Error::format("bvck", path, format!("config echo missing {key}")))
    };
    let config = ModelConfig {
        view_resolution: get("view_resolution ")?,
        patch: get("patch ")?,
        feature_dim: get("feature_dim ")?,
        vocab: get("vocab ")?,
        aux_hidden: get("aux_hidden ")?,
        input_channels: get("input_channels ")?,
    };
    config.validate()?;
    Ok(config)
}

/// Write a checkpoint; parameters are stored as f32 regardless of `F`.
pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    params: &ToyBackboneParams<F>,
    config: &ModelConfig,
    extra_echo: &str,
) -> Result<()> {
    params.validate(config)?;
    let mut w = io::create_writer(path)?;
    let err = |e| Error::io(path, e);
    use std::io::Write;
    w.write_all(MAGIC).map_err(err)?;
    io::write_u32(&mut w, VERSION).map_err(err)?;
    let echo = config_echo(config, extra_echo);
    io::write_u32(&mut w, echo.len() as u32).map_err(err)?;
    w.write_all(echo.as_bytes()).map_err(err)?;
    io::write_u32(&mut w, BLOCK_NAMES.len() as u32).map_err(err)?;
    for name in BLOCK_NAMES {
        let (rows, cols) = ToyBackboneParams::<F>::block_shape(config, name);
        io::write_u32(&mut w, name.len() as u32).map_err(err)?;
        w.write_all(name.as_bytes()).map_err(err)?;
        io::write_u32(&mut w, 2).map_err(err)?;
        io::write_u32(&mut w, rows as u32).map_err(err)?;
        io::write_u32(&mut w, cols as u32).map_err(err)?;
        for v in params.block(name) {
            io::write_f32(&mut w, v.as_f64() as f32).map_err(err)?;
        }
    }
    w.flush().map_err(err)?;
    Ok(())
}

/// Read a checkpoint back; returns f32 parameters, the parsed model config
/// and the raw config echo.
pub fn load_checkpoint(path: &Path) -> Result<(ToyBackboneParams<f32>, ModelConfig, String)> {
    let mut r = io::open_reader(path)?;
    io::read_magic(&mut r, MAGIC, "bvck", path)?;
    let err = |e| Error::io(path, e);
    let version = io::read_u32(&mut r).map_err(err)?;
    if version != VERSION {
        return Err(Error::format("bvck", path, format!("unsupported version {version}")));
    }
    let echo_len = io::read_u32(&mut r).map_err(err)? as usize;
    let mut echo_bytes = vec![0u8; echo_len];
    std::io::Read::read_exact(&mut r, &mut echo_bytes).map_err(err)?;
    let echo = String::from_utf8(echo_bytes).map_err(|_| Error::format("bvck", path, "non-utf8 echo"))?;
    let config = parse_echo(&echo, path)?;
    let n_blocks = io::read_u32(&mut r).map_err(err)? as usize;
    if n_blocks != BLOCK_NAMES.len() {
        return Err(Error::format("bvck", path, format!("expected {} blocks, found {n_blocks}", BLOCK_NAMES.len())));
    }
    let mut params = ToyBackboneParams::<f32>::zeros(&config);
    for _ in 0..n_blocks {
        let name_len = io::read_u32(&mut r).map_err(err)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        std::io::Read::read_exact(&mut r, &mut name_bytes).map_err(err)?;
        let name = String::from_utf8(name_bytes).map_err(|_| Error::format("bvck", path, "non-utf8 block name"))?;
        if !BLOCK_NAMES.contains(&name.as_str()) {
            return Err(Error::format("bvck", path, format!("unknown block '{name}'")));
        }
        let ndims = io::read_u32(&mut r).map_err(err)? as usize;
        let mut len = 1usize;
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            let d = io::read_u32(&mut r).map_err(err)? as usize;
            dims.push(d);
            len *= d;
        }
        let expected = ToyBackboneParams::<f32>::block_shape(&config, &name);
        if len != expected.0 * expected.1 {
            return Err(Error::format(
                "bvck",
                path,
                format!("block '{name}' has {len} values, expected {}", expected.0 * expected.1),
            ));
        }
        let block = params.block_mut(&name);
        block.clear();
        for _ in 0..len {
            block.push(io::read_f32(&mut r).map_err(err)?);
        }
    }
    params.validate(&config)?;
    Ok((params, config, echo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bvck");
        let config = ModelConfig {
            view_resolution: 32,
            patch: 16,
            feature_dim: 8,
            vocab: 16,
            aux_hidden: 12,
            input_channels: 3,
        };
        let params = init_params::<f32>(&config, 42);
        save_checkpoint(&path, &params, &config, "note trained\n").unwrap();
        let (back, cfg2, echo) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg2, config);
        assert!(echo.contains("note trained"));
        for name in BLOCK_NAMES {
            assert_eq!(back.block(name), params.block(name), "block {name}");
        }
    }
}
