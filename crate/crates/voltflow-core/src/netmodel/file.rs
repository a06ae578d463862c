//! Feeder file format: a versioned TOML schema with physical units
//! (ohms, MVA, MW) converted to per-unit on load.

use std::collections::BTreeMap;

use serde::Deserialize;
use thiserror::Error;

use super::{Bus, BusId, FeederNetwork, Line, NetworkError, PerUnitBase};

pub const FEEDER_SCHEMA: &str = "feeder/v1";

const DEFAULT_PF: f64 = 0.9;

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("feeder file is not valid TOML: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("unsupported schema {found:?}, expected {expected:?}")]
    UnsupportedSchema { found: String, expected: &'static str },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeederFile {
    schema: String,
    base: BaseSection,
    slack: SlackSection,
    #[serde(default)]
    defaults: DefaultsSection,
    lines: Vec<LineRow>,
    #[serde(default)]
    loads: Vec<LoadRow>,
    #[serde(default)]
    inverters: Vec<InverterRow>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BaseSection {
    v_base_kv: f64,
    s_base_kva: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SlackSection {
    id: u32,
    v0_pu: f64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DefaultsSection {
    pf: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LineRow {
    from: u32,
    to: u32,
    r_ohm: f64,
    x_ohm: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LoadRow {
    bus: u32,
    peak_mva: f64,
    pf: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InverterRow {
    bus: u32,
    nameplate_mw: f64,
    p_operating_mw: f64,
    q_limit_override_mvar: Option<f64>,
}

fn check_pf(pf: f64, context: &str) -> Result<f64, ParseError> {
    if !(pf > 0.0 && pf <= 1.0) || !pf.is_finite() {
        return Err(ParseError::Invalid(format!(
            "{context}: power factor must lie in (0, 1], got {pf}"
        )));
    }
    Ok(pf)
}

pub fn parse_network(text: &str) -> Result<FeederNetwork, ParseError> {
    let file: FeederFile = toml::from_str(text)?;
    if file.schema != FEEDER_SCHEMA {
        return Err(ParseError::UnsupportedSchema {
            found: file.schema,
            expected: FEEDER_SCHEMA,
        });
    }

    let base = PerUnitBase::new(file.base.v_base_kv, file.base.s_base_kva)?;
    let slack = BusId(file.slack.id);
    let default_pf = check_pf(file.defaults.pf.unwrap_or(DEFAULT_PF), "defaults.pf")?;

    let lines: Vec<Line> = file
        .lines
        .iter()
        .map(|row| Line {
            from: BusId(row.from),
            to: BusId(row.to),
            r: base.impedance_to_pu(row.r_ohm),
            x: base.impedance_to_pu(row.x_ohm),
        })
        .collect();

    // The bus set is implicit in the line list; loads and inverters must
    // refer to buses that appear there.
    let mut buses: BTreeMap<BusId, Bus> = BTreeMap::new();
    for line in &lines {
        for end in [line.from, line.to] {
            if end != slack {
                buses.entry(end).or_insert_with(|| Bus::passive(end));
            }
        }
    }

    for load in &file.loads {
        let id = BusId(load.bus);
        let bus = buses
            .get_mut(&id)
            .ok_or_else(|| ParseError::Invalid(format!("load references unknown bus {id}")))?;
        if bus.load_p > 0.0 || bus.load_q > 0.0 {
            return Err(ParseError::Invalid(format!("bus {id} has more than one load entry")));
        }
        if !(load.peak_mva >= 0.0) || !load.peak_mva.is_finite() {
            return Err(ParseError::Invalid(format!(
                "load at bus {id}: peak_mva must be finite and non-negative"
            )));
        }
        let pf = match load.pf {
            Some(pf) => check_pf(pf, &format!("load at bus {id}"))?,
            None => default_pf,
        };
        let s = base.power_to_pu(load.peak_mva);
        bus.load_p = pf * s;
        bus.load_q = (1.0 - pf * pf).sqrt() * s;
    }

    for inv in &file.inverters {
        let id = BusId(inv.bus);
        let bus = buses
            .get_mut(&id)
            .ok_or_else(|| ParseError::Invalid(format!("inverter references unknown bus {id}")))?;
        if bus.is_control() {
            return Err(ParseError::Invalid(format!("bus {id} has more than one inverter entry")));
        }
        if !(inv.nameplate_mw > 0.0) || !inv.nameplate_mw.is_finite() {
            return Err(ParseError::Invalid(format!(
                "inverter at bus {id}: nameplate_mw must be positive"
            )));
        }
        if !(0.0..=inv.nameplate_mw).contains(&inv.p_operating_mw) {
            return Err(ParseError::Invalid(format!(
                "inverter at bus {id}: p_operating_mw must lie in [0, nameplate], got {}",
                inv.p_operating_mw
            )));
        }
        let q_cap = match inv.q_limit_override_mvar {
            Some(q) if q > 0.0 && q.is_finite() => base.power_to_pu(q),
            Some(q) => {
                return Err(ParseError::Invalid(format!(
                    "inverter at bus {id}: q_limit_override_mvar must be positive, got {q}"
                )))
            }
            None => {
                let s = base.power_to_pu(inv.nameplate_mw);
                let p = base.power_to_pu(inv.p_operating_mw);
                let cap = (s * s - p * p).sqrt();
                if !(cap > 0.0) {
                    return Err(ParseError::Invalid(format!(
                        "inverter at bus {id}: operating at nameplate leaves no reactive \
                         capability; set q_limit_override_mvar"
                    )));
                }
                cap
            }
        };
        bus.gen_p = base.power_to_pu(inv.p_operating_mw);
        bus.q_limits = Some((-q_cap, q_cap));
    }

    Ok(FeederNetwork::new(
        base,
        slack,
        file.slack.v0_pu,
        buses.into_values().collect(),
        lines,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const SMALL: &str = r#"
schema = "feeder/v1"

base = { v_base_kv = 12.35, s_base_kva = 1000.0 }
slack = { id = 1, v0_pu = 1.0 }

lines = [
  { from = 1, to = 2, r_ohm = 0.259, x_ohm = 0.808 },
  { from = 2, to = 3, r_ohm = 0.031, x_ohm = 0.092 },
]

loads = [{ bus = 3, peak_mva = 0.5 }]

inverters = [{ bus = 2, nameplate_mw = 1.0, p_operating_mw = 0.6 }]
"#;

    #[test]
    fn parses_small_network() {
        let net = parse_network(SMALL).unwrap();
        assert_eq!(net.n(), 2);
        assert_eq!(net.slack(), BusId(1));
        assert_eq!(net.control_buses(), vec![BusId(2)]);

        let line = &net.lines()[0];
        assert_relative_eq!(line.r, 0.259 / 152.5225, max_relative = 1e-12);

        let load_bus = net.bus(BusId(3)).unwrap();
        assert_relative_eq!(load_bus.load_p, 0.9 * 0.5, max_relative = 1e-12);
        assert_relative_eq!(load_bus.load_q, 0.5 * (1.0f64 - 0.81).sqrt(), max_relative = 1e-12);

        let inv_bus = net.bus(BusId(2)).unwrap();
        assert_relative_eq!(inv_bus.gen_p, 0.6, max_relative = 1e-12);
        let (lo, hi) = inv_bus.q_limits.unwrap();
        assert_relative_eq!(hi, (1.0f64 - 0.36).sqrt(), max_relative = 1e-12);
        assert_relative_eq!(lo, -hi);
    }

    #[test]
    fn rejects_unknown_fields_and_schema() {
        let bad = SMALL.replace("feeder/v1", "feeder/v2");
        assert!(matches!(
            parse_network(&bad).unwrap_err(),
            ParseError::UnsupportedSchema { .. }
        ));

        let bad = SMALL.replace("v0_pu = 1.0", "v0_pu = 1.0, frequency_hz = 60.0");
        assert!(matches!(parse_network(&bad).unwrap_err(), ParseError::Toml(_)));
    }

    #[test]
    fn rejects_dangling_references() {
        let bad = SMALL.replace("{ bus = 3, peak_mva = 0.5 }", "{ bus = 7, peak_mva = 0.5 }");
        let err = parse_network(&bad).unwrap_err();
        assert!(err.to_string().contains("unknown bus 7"), "{err}");
    }

    #[test]
    fn q_override_wins() {
        let text = SMALL.replace(
            "p_operating_mw = 0.6 }",
            "p_operating_mw = 0.6, q_limit_override_mvar = 0.25 }",
        );
        let net = parse_network(&text).unwrap();
        let (lo, hi) = net.bus(BusId(2)).unwrap().q_limits.unwrap();
        assert_relative_eq!(hi, 0.25, max_relative = 1e-12);
        assert_relative_eq!(lo, -0.25, max_relative = 1e-12);
    }

    #[test]
    fn per_bus_pf_override() {
        let text = SMALL.replace("{ bus = 3, peak_mva = 0.5 }", "{ bus = 3, peak_mva = 0.5, pf = 1.0 }");
        let net = parse_network(&text).unwrap();
        let bus = net.bus(BusId(3)).unwrap();
        assert_relative_eq!(bus.load_p, 0.5, max_relative = 1e-12);
        assert_eq!(bus.load_q, 0.0);
    }
}
