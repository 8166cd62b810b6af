//! Checkpoint container: an ASCII header (version, dtype, epoch/step
//! counters, RNG stream positions, and one line per block naming its shape
//! and byte offset) followed by the raw little-endian IEEE-754 value blocks.
//! Parameter blocks come first, then the optimizer moments as
//! `adam.m.<name>` / `adam.v.<name>`. Save → load → save is byte-identical.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{contract, Result};
use mmer_core::optim::AdamState;
use mmer_core::rng::RngState;
use mmer_core::scalar::Scalar;
use mmer_core::train::Checkpoint;

pub const HEADER_MAGIC: &str = "MMERCKPT v1";

/// Little-endian value codec for the supported element types.
pub trait ScalarCodec: Scalar {
    const WIDTH: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl ScalarCodec for f64 {
    const WIDTH: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

impl ScalarCodec for f32 {
    const WIDTH: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<Vec<u8>> {
    if s.len() % 2 != 0 {
        return Err(contract("checkpoint: odd-length hex field"));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| {
            u8::from_str_radix(&s[i..i + 2], 16)
                .map_err(|_| contract("checkpoint: invalid hex field"))
        })
        .collect()
}

fn rng_line(name: &str, state: &RngState) -> String {
    format!(
        "{name} {} {} {}\n",
        hex(&state.seed),
        state.stream,
        state.word_pos
    )
}

fn parse_rng_line(line: &str, expected: &str) -> Result<RngState> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != expected {
        return Err(contract(format!(
            "checkpoint: malformed rng line, expected {expected:?}"
        )));
    }
    let seed_bytes = unhex(parts[1])?;
    if seed_bytes.len() != 32 {
        return Err(contract("checkpoint: rng seed must be 32 bytes"));
    }
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&seed_bytes);
    Ok(RngState {
        seed,
        stream: parts[2]
            .parse()
            .map_err(|_| contract("checkpoint: bad rng stream"))?,
        word_pos: parts[3]
            .parse()
            .map_err(|_| contract("checkpoint: bad rng word position"))?,
    })
}

struct Block<'a, S> {
    name: String,
    shape: Vec<usize>,
    values: &'a [S],
}

pub fn save_checkpoint<S: ScalarCodec>(path: &Path, ck: &Checkpoint<S>) -> Result<()> {
    let mut blocks: Vec<Block<'_, S>> = Vec::new();
    for (name, shape, values) in &ck.params {
        blocks.push(Block {
            name: name.clone(),
            shape: shape.clone(),
            values,
        });
    }
    for (name, m, v) in &ck.adam.moments {
        blocks.push(Block {
            name: format!("adam.m.{name}"),
            shape: vec![m.len()],
            values: m,
        });
        blocks.push(Block {
            name: format!("adam.v.{name}"),
            shape: vec![v.len()],
            values: v,
        });
    }

    let mut header = String::new();
    header.push_str(HEADER_MAGIC);
    header.push('\n');
    header.push_str(&format!("dtype {}\n", S::NAME));
    header.push_str(&format!("epoch {}\n", ck.epoch));
    header.push_str(&format!("global_step {}\n", ck.global_step));
    header.push_str(&format!("adam_step {}\n", ck.adam.step));
    header.push_str(&rng_line("rng_shuffle", &ck.shuffle_rng));
    header.push_str(&rng_line("rng_dropout", &ck.dropout_rng));
    header.push_str(&format!("blocks {}\n", blocks.len()));
    let mut offset = 0usize;
    for b in &blocks {
        let dims: Vec<String> = b.shape.iter().map(|d| d.to_string()).collect();
        header.push_str(&format!(
            "{} {} {} {} {}\n",
            b.name,
            b.shape.len(),
            dims.join(" "),
            offset,
            b.values.len()
        ));
        offset += b.values.len() * S::WIDTH;
    }
    header.push_str("END\n");

    let mut data = Vec::with_capacity(offset);
    for b in &blocks {
        for v in b.values {
            v.write_le(&mut data);
        }
    }

    let mut file = fs::File::create(path)?;
    file.write_all(header.as_bytes())?;
    file.write_all(&data)?;
    Ok(())
}

/// Reads just the dtype tag, for precision dispatch and mismatch reporting.
pub fn checkpoint_dtype(path: &Path) -> Result<String> {
    let bytes = fs::read(path)
        .map_err(|e| contract(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let text = std::str::from_utf8(&bytes[..bytes.len().min(256)])
        .map_err(|_| contract("checkpoint: header is not ASCII"))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER_MAGIC) {
        return Err(contract(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let dtype_line = lines
        .next()
        .ok_or_else(|| contract("checkpoint: missing dtype line"))?;
    dtype_line
        .strip_prefix("dtype ")
        .map(str::to_string)
        .ok_or_else(|| contract("checkpoint: malformed dtype line"))
}

pub fn load_checkpoint<S: ScalarCodec>(path: &Path) -> Result<Checkpoint<S>> {
    let bytes = fs::read(path)
        .map_err(|e| contract(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let end_marker = b"END\n";
    let header_end = bytes
        .windows(end_marker.len())
        .position(|w| w == end_marker)
        .ok_or_else(|| contract("checkpoint: missing END marker"))?;
    let header = std::str::from_utf8(&bytes[..header_end + end_marker.len()])
        .map_err(|_| contract("checkpoint: header is not ASCII"))?;
    let data = &bytes[header_end + end_marker.len()..];

    let mut lines = header.lines();
    if lines.next() != Some(HEADER_MAGIC) {
        return Err(contract(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let expect_field = |line: Option<&str>, field: &str| -> Result<String> {
        line.and_then(|l| l.strip_prefix(field).map(|rest| rest.trim().to_string()))
            .ok_or_else(|| contract(format!("checkpoint: missing {field} line")))
    };
    let dtype = expect_field(lines.next(), "dtype")?;
    if dtype != S::NAME {
        return Err(contract(format!(
            "checkpoint dtype is {dtype}, requested precision is {}",
            S::NAME
        )));
    }
    let epoch: usize = expect_field(lines.next(), "epoch")?
        .parse()
        .map_err(|_| contract("checkpoint: bad epoch"))?;
    let global_step: u64 = expect_field(lines.next(), "global_step")?
        .parse()
        .map_err(|_| contract("checkpoint: bad global_step"))?;
    let adam_step: u64 = expect_field(lines.next(), "adam_step")?
        .parse()
        .map_err(|_| contract("checkpoint: bad adam_step"))?;
    let shuffle_rng = parse_rng_line(
        lines.next().ok_or_else(|| contract("checkpoint: truncated header"))?,
        "rng_shuffle",
    )?;
    let dropout_rng = parse_rng_line(
        lines.next().ok_or_else(|| contract("checkpoint: truncated header"))?,
        "rng_dropout",
    )?;
    let block_count: usize = expect_field(lines.next(), "blocks")?
        .parse()
        .map_err(|_| contract("checkpoint: bad block count"))?;

    let mut params: Vec<(String, Vec<usize>, Vec<S>)> = Vec::new();
    let mut m_blocks: Vec<(String, Vec<S>)> = Vec::new();
    let mut v_blocks: Vec<(String, Vec<S>)> = Vec::new();
    for i in 0..block_count {
        let line = lines
            .next()
            .ok_or_else(|| contract(format!("checkpoint: header ends at block {i}")))?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() < 4 {
            return Err(contract(format!("checkpoint: malformed block line {i}")));
        }
        let name = parts[0].to_string();
        let rank: usize = parts[1]
            .parse()
            .map_err(|_| contract(format!("checkpoint: bad rank in block {name}")))?;
        if parts.len() != 4 + rank {
            return Err(contract(format!(
                "checkpoint: block {name} expects {rank} dims"
            )));
        }
        let shape: Vec<usize> = parts[2..2 + rank]
            .iter()
            .map(|d| {
                d.parse::<usize>()
                    .map_err(|_| contract(format!("checkpoint: bad dim in block {name}")))
            })
            .collect::<Result<_>>()?;
        let offset: usize = parts[2 + rank]
            .parse()
            .map_err(|_| contract(format!("checkpoint: bad offset in block {name}")))?;
        let numel: usize = parts[3 + rank]
            .parse()
            .map_err(|_| contract(format!("checkpoint: bad length in block {name}")))?;
        if shape.iter().product::<usize>() != numel {
            return Err(contract(format!(
                "checkpoint: block {name} shape {shape:?} does not match {numel} values"
            )));
        }
        let byte_end = offset + numel * S::WIDTH;
        if byte_end > data.len() {
            return Err(contract(format!(
                "checkpoint: block {name} runs past the data section"
            )));
        }
        let values: Vec<S> = (0..numel)
            .map(|k| S::read_le(&data[offset + k * S::WIDTH..]))
            .collect();
        if let Some(rest) = name.strip_prefix("adam.m.") {
            m_blocks.push((rest.to_string(), values));
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            v_blocks.push((rest.to_string(), values));
        } else {
            params.push((name, shape, values));
        }
    }
    if lines.next() != Some("END") {
        return Err(contract("checkpoint: header must end with END"));
    }

    if m_blocks.len() != v_blocks.len() || m_blocks.len() != params.len() {
        return Err(contract(format!(
            "checkpoint: {} parameters but {}/{} optimizer moment blocks",
            params.len(),
            m_blocks.len(),
            v_blocks.len()
        )));
    }
    let moments = params
        .iter()
        .zip(m_blocks)
        .zip(v_blocks)
        .map(|(((p_name, _, _), (m_name, m)), (v_name, v))| {
            if &m_name != p_name || &v_name != p_name {
                Err(contract(format!(
                    "checkpoint: moment blocks for {m_name}/{v_name} out of order with {p_name}"
                )))
            } else {
                Ok((m_name, m, v))
            }
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Checkpoint {
        epoch,
        global_step,
        params,
        adam: AdamState {
            step: adam_step,
            moments,
        },
        shuffle_rng,
        dropout_rng,
    })
}
