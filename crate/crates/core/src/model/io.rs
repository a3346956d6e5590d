//! Plain-text network format.
//!
//! ```text
//! grng-network 1
//! head gaussian
//! layer <in> <out> <bias|nobias> <activation>
//! <out lines of row-major weights, bias column last>
//! ```
//!
//! Floats are written in Rust's shortest round-trip form, so parsing a
//! written network reproduces it exactly.

use super::{Activation, Head, Layer, ModelError, Network};
use crate::linalg::Mat;

const MAGIC: &str = "grng-network 1";

pub fn write_network(net: &Network) -> String {
    let mut s = String::new();
    s.push_str(MAGIC);
    s.push('\n');
    s.push_str(&format!("head {}\n", net.head().name()));
    for l in net.layers() {
        s.push_str(&format!(
            "layer {} {} {} {}\n",
            l.input_dim(),
            l.output_dim(),
            if l.bias { "bias" } else { "nobias" },
            l.activation.name()
        ));
        for r in 0..l.weights.rows() {
            let row: Vec<String> = l.weights.row(r).iter().map(|v| format!("{v:?}")).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
    }
    s
}

pub fn parse_network(text: &str) -> Result<Network, ModelError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let err = |line: usize, message: &str| ModelError::Parse {
        line,
        message: message.to_string(),
    };

    match lines.next() {
        Some((_, l)) if l == MAGIC => {}
        Some((n, _)) => return Err(err(n, "missing grng-network header")),
        None => return Err(err(0, "empty input")),
    }
    let head = match lines.next() {
        Some((n, l)) => {
            let name = l
                .strip_prefix("head ")
                .ok_or_else(|| err(n, "expected `head <name>`"))?;
            Head::from_name(name.trim()).ok_or_else(|| err(n, "unknown head"))?
        }
        None => return Err(err(0, "missing head line")),
    };

    let mut layers = Vec::new();
    while let Some((n, l)) = lines.next() {
        let parts: Vec<&str> = l.split_whitespace().collect();
        if parts.len() != 5 || parts[0] != "layer" {
            return Err(err(n, "expected `layer <in> <out> <bias> <activation>`"));
        }
        let input: usize = parts[1].parse().map_err(|_| err(n, "bad input dim"))?;
        let output: usize = parts[2].parse().map_err(|_| err(n, "bad output dim"))?;
        let bias = match parts[3] {
            "bias" => true,
            "nobias" => false,
            _ => return Err(err(n, "bias flag must be bias|nobias")),
        };
        let activation = Activation::from_name(parts[4]).ok_or_else(|| err(n, "unknown activation"))?;
        let cols = input + usize::from(bias);
        let mut data = Vec::with_capacity(output * cols);
        for _ in 0..output {
            let (rn, row) = lines.next().ok_or_else(|| err(n, "truncated weight block"))?;
            let before = data.len();
            for tok in row.split_whitespace() {
                data.push(tok.parse::<f64>().map_err(|_| err(rn, "bad weight value"))?);
            }
            if data.len() - before != cols {
                return Err(err(rn, "weight row has wrong length"));
            }
        }
        layers.push(Layer {
            weights: Mat::from_vec(output, cols, data)?,
            bias,
            activation,
        });
    }
    Network::new(layers, head)
}
