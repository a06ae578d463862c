//! Bundled feeder data.

use crate::netmodel::FeederNetwork;

/// Source text of the bundled Southern California Edison 42-bus feeder
/// (see `data/sce42.toml` for provenance notes on the repaired rows).
pub const SCE42_TOML: &str = include_str!("../data/sce42.toml");

/// Parsed bundled feeder.
pub fn sce42() -> FeederNetwork {
    FeederNetwork::from_toml_str(SCE42_TOML).expect("bundled feeder data is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::BusId;

    #[test]
    fn sce42_shape() {
        let net = sce42();
        assert_eq!(net.n(), 44);
        assert_eq!(net.lines().len(), 44);
        assert_eq!(net.slack(), BusId(1));
        assert_eq!(
            net.control_buses(),
            vec![BusId(2), BusId(12), BusId(26), BusId(29), BusId(31)]
        );
        let loads: f64 = net.buses().iter().map(|b| b.load_p).sum();
        // 10.3 MVA of peak demand at pf 0.9 on a 1 MVA base
        assert!((loads - 0.9 * 10.3).abs() < 1e-9, "total load {loads}");
    }

    #[test]
    fn sce42_trunk_path() {
        let net = sce42();
        let path = net.path_to_root(BusId(12)).unwrap();
        let hops: Vec<u32> = std::iter::once(path[0].from.0)
            .chain(path.iter().map(|l| l.to.0))
            .collect();
        assert_eq!(hops, vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12]);
    }
}
