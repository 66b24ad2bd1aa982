//! Parameter checkpoints: one tensor text dump per parameter plus a
//! manifest of names and shapes.

use std::fs;
use std::io::BufReader;
use std::path::Path;

use sha2::{Digest, Sha256};

use oasis_core::{Error, Result, Scalar, Tensor};

use crate::config::ModelConfig;
use crate::params::{Layout, Params};

pub const MANIFEST: &str = "params.manifest";

pub fn tensor_file(name: &str) -> String {
    format!("{name}.tensor")
}

/// Writes `dir/params.manifest` and `dir/<name>.tensor` for each parameter.
pub fn save<S: Scalar>(dir: &Path, params: &Params<S>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (name, t) in params.layout.names.iter().zip(&params.tensors) {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{name} {}\n", dims.join(" ")));
        fs::write(dir.join(tensor_file(name)), t.to_text())?;
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Reads a checkpoint and checks it against the layout `cfg` implies.
pub fn load<S: Scalar>(dir: &Path, cfg: &ModelConfig) -> Result<Params<S>> {
    let layout = Layout::new(cfg);
    let manifest = fs::read_to_string(dir.join(MANIFEST))?;
    let mut names = Vec::new();
    for (i, line) in manifest.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let name = parts.next().ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: "empty manifest line".into(),
        })?;
        let shape = parts
            .map(|p| {
                p.parse::<usize>().map_err(|e| Error::Parse {
                    line: i + 1,
                    msg: format!("bad extent {p:?}: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        names.push((name.to_string(), shape));
    }
    let expected: Vec<(String, Vec<usize>)> = layout.names.iter().cloned().zip(layout.shapes.iter().cloned()).collect();
    if names != expected {
        return Err(Error::Config(format!(
            "checkpoint in {} does not match the model configuration",
            dir.display()
        )));
    }
    let mut tensors = Vec::with_capacity(layout.len());
    for (name, shape) in &expected {
        let file = fs::File::open(dir.join(tensor_file(name)))?;
        let t: Tensor<S> = Tensor::read_text(&mut BufReader::new(file))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Dimension(format!("{name} has shape {:?}, manifest says {shape:?}", t.shape())));
        }
        tensors.push(t);
    }
    let p = Params { layout, tensors };
    p.validate()?;
    Ok(p)
}

/// SHA-256 over every parameter's name and text dump, in layout order.
pub fn content_hash<S: Scalar>(params: &Params<S>) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.layout.names.iter().zip(&params.tensors) {
        h.update(name.as_bytes());
        h.update(b"\n");
        h.update(t.to_text().as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
