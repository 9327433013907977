//! Plain-text checkpoints: one `key=value` header line, then one parameter
//! per line with 17 significant digits.

use std::io::{BufRead, Write};

use super::{Mlp, MlpSpec, ParamModel, Tabular, Trainable, TwoHead, Variant};
use crate::error::{Error, Result};

const MAGIC: &str = "ctmc-model";

pub fn write_checkpoint(model: &ParamModel, mut out: impl Write) -> Result<()> {
    let header = match model {
        ParamModel::Tabular(m) => format!(
            "{MAGIC} variant=tabular states={} seq_len={} buckets={} horizon={:e} params={}",
            m.num_states(),
            m.seq_len(),
            m.buckets(),
            m.horizon(),
            m.params().len()
        ),
        ParamModel::Mlp(m) => {
            let s = m.spec();
            format!(
                "{MAGIC} variant=mlp states={} seq_len={} buckets={} horizon={:e} width={} params={}",
                s.num_states,
                s.seq_len,
                s.time_features,
                s.horizon,
                s.width,
                m.params().len()
            )
        }
    };
    writeln!(out, "{header}")?;
    for p in model.params() {
        writeln!(out, "{p:.16e}")?;
    }
    Ok(())
}

pub fn read_checkpoint(input: impl BufRead) -> Result<ParamModel> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty checkpoint".into()))??;
    let mut fields = header.split_whitespace();
    if fields.next() != Some(MAGIC) {
        return Err(Error::Parse("not a model checkpoint".into()));
    }
    let mut get = std::collections::BTreeMap::new();
    for f in fields {
        let (k, v) = f
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("bad header field `{f}`")))?;
        get.insert(k.to_string(), v.to_string());
    }
    let field = |k: &str| -> Result<&str> {
        get.get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::Parse(format!("checkpoint header lacks `{k}`")))
    };
    let int = |k: &str| -> Result<usize> {
        field(k)?
            .parse()
            .map_err(|_| Error::Parse(format!("header field `{k}` is not an integer")))
    };
    let variant: Variant = field("variant")?.parse()?;
    let horizon: f64 = field("horizon")?
        .parse()
        .map_err(|_| Error::Parse("header field `horizon` is not a number".into()))?;
    let expected = int("params")?;

    let mut params = Vec::with_capacity(expected);
    for (n, line) in lines.enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: f64 = line
            .parse()
            .map_err(|_| Error::Parse(format!("parameter line {} is not a number", n + 2)))?;
        params.push(v);
    }
    if params.len() != expected {
        return Err(Error::Parse(format!("expected {expected} parameters, found {}", params.len())));
    }

    let (states, seq_len, buckets) = (int("states")?, int("seq_len")?, int("buckets")?);
    Ok(match variant {
        Variant::Tabular => ParamModel::Tabular(Tabular::from_parts(states, seq_len, buckets, horizon, params)?),
        Variant::Mlp => {
            let spec = MlpSpec {
                num_states: states,
                seq_len,
                horizon,
                width: int("width")?,
                time_features: buckets,
            };
            ParamModel::Mlp(Mlp::from_parts(spec, params)?)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn round_trip(m: ParamModel) {
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn tabular_round_trips_bit_exactly() {
        round_trip(ParamModel::Tabular(Tabular::new(4, 2, 8, 1.5, &mut seeded(2)).unwrap()));
    }

    #[test]
    fn mlp_round_trips_bit_exactly() {
        let spec = MlpSpec { width: 6, time_features: 4, ..MlpSpec::new(3, 2, 1.0) };
        round_trip(ParamModel::Mlp(Mlp::new(spec, &mut seeded(9)).unwrap()));
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let m = ParamModel::Tabular(Tabular::zeros(3, 1, 2, 1.0).unwrap());
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        buf.truncate(buf.len() - 5);
        let text = String::from_utf8(buf).unwrap();
        let cut: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
        assert!(read_checkpoint(cut.as_bytes()).is_err());
    }
}
