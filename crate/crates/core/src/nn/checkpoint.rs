//! Text checkpoints. Every value is stored as the hexadecimal bit pattern of
//! its `f64`, so a save/load cycle is bit-exact.

use std::io::{BufRead, Write};

use super::{Activation, LayerSpec, Network, NnError, Result, Tensor};

const MAGIC: &str = "mprlab-network 1";

/// A network together with the optimiser step count it was saved at.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub network: Network,
    pub step: u64,
}

fn bad(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

pub fn save<W: Write>(net: &Network, step: u64, mut out: W) -> Result<()> {
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "seed {}", net.seed())?;
    writeln!(out, "step {step}")?;
    writeln!(out, "layers {}", net.specs().len())?;
    for spec in net.specs() {
        match *spec {
            LayerSpec::Dense { input, output, activation } => {
                writeln!(out, "dense {input} {output} {}", activation.name())?
            }
            LayerSpec::Lstm { input, hidden } => writeln!(out, "lstm {input} {hidden}")?,
            LayerSpec::Gru { input, hidden } => writeln!(out, "gru {input} {hidden}")?,
        }
    }
    writeln!(out, "params {}", net.params().len())?;
    for (name, p) in net.param_names().iter().zip(net.params()) {
        let dims: Vec<String> = p.shape().iter().map(usize::to_string).collect();
        writeln!(out, "{name} {} {}", p.shape().len(), dims.join(" "))?;
        let vals: Vec<String> = p.data().iter().map(|v| format!("{:016x}", v.to_bits())).collect();
        writeln!(out, "{}", vals.join(" "))?;
    }
    Ok(())
}

pub fn load<R: BufRead>(input: R) -> Result<Checkpoint> {
    let mut lines = input.lines();
    let mut next = move || -> Result<String> { lines.next().ok_or_else(|| bad("unexpected end of file"))?.map_err(NnError::from) };
    if next()? != MAGIC {
        return Err(bad("not a network checkpoint"));
    }
    let field = |line: String, key: &str| -> Result<String> {
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| bad(format!("expected `{key}`")))
    };
    let parse = |s: &str| -> Result<usize> { s.parse().map_err(|_| bad(format!("bad integer `{s}`"))) };
    let seed: u64 = field(next()?, "seed")?.parse().map_err(|_| bad("bad seed"))?;
    let step: u64 = field(next()?, "step")?.parse().map_err(|_| bad("bad step"))?;
    let n_layers = parse(&field(next()?, "layers")?)?;
    let mut specs = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let line = next()?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        let spec = match parts.as_slice() {
            ["dense", i, o, a] => LayerSpec::Dense {
                input: parse(i)?,
                output: parse(o)?,
                activation: Activation::parse(a).ok_or_else(|| bad(format!("unknown activation `{a}`")))?,
            },
            ["lstm", i, h] => LayerSpec::Lstm { input: parse(i)?, hidden: parse(h)? },
            ["gru", i, h] => LayerSpec::Gru { input: parse(i)?, hidden: parse(h)? },
            _ => return Err(bad(format!("bad layer line `{line}`"))),
        };
        specs.push(spec);
    }
    let n_params = parse(&field(next()?, "params")?)?;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let header = next()?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() < 2 {
            return Err(bad(format!("bad parameter header `{header}`")));
        }
        let ndim = parse(parts[1])?;
        if parts.len() != 2 + ndim {
            return Err(bad(format!("bad parameter header `{header}`")));
        }
        let shape: Vec<usize> = parts[2..].iter().map(|s| parse(s)).collect::<Result<_>>()?;
        let data: Vec<f64> = next()?
            .split_whitespace()
            .map(|h| u64::from_str_radix(h, 16).map(f64::from_bits).map_err(|_| bad(format!("bad value `{h}`"))))
            .collect::<Result<_>>()?;
        params.push(Tensor::from_vec(&shape, data)?);
    }
    Ok(Checkpoint { network: Network::from_parts(specs, seed, params)?, step })
}
