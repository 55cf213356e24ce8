// SPDX-License-Identifier: Apache-2.0

//! Graphs, profile packs, fleets and traces shipped with the crate,
//! addressable by name wherever a file path is accepted.

pub const DAGS: &[(&str, &str)] = &[
    ("dense-7b", include_str!("../assets/dags/dense-7b.json")),
    ("moe-57b", include_str!("../assets/dags/moe-57b.json")),
];

pub const PROFILES: &[(&str, &str)] = &[
    ("dense-7b", include_str!("../assets/profiles/dense-7b.json")),
    ("moe-57b", include_str!("../assets/profiles/moe-57b.json")),
];

pub const FLEETS: &[(&str, &str)] = &[("default", include_str!("../assets/fleets/default.json"))];

pub const TRACES: &[(&str, &str)] = &[
    ("chat", include_str!("../assets/traces/chat.csv")),
    ("coding", include_str!("../assets/traces/coding.csv")),
];

/// Workload of the benchmark scenario shipped with each bundled model.
pub const SCENARIO_SYNTH: &str = "constant:rate=40,duration=600,input=1024,output=128";
pub const SCENARIO_SEED: u64 = 7;

fn find(table: &[(&str, &'static str)], name: &str) -> Option<&'static str> {
    table.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

pub fn dag(name: &str) -> Option<&'static str> {
    find(DAGS, name)
}

pub fn profiles(name: &str) -> Option<&'static str> {
    find(PROFILES, name)
}

pub fn fleet(name: &str) -> Option<&'static str> {
    find(FLEETS, name)
}

pub fn trace(name: &str) -> Option<&'static str> {
    find(TRACES, name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::opgraph::OperatorDag;
    use crate::perfmodel::ProfileSet;
    use crate::placement::Fleet;
    use crate::workload::parse_trace;

    #[test]
    fn every_asset_parses() {
        for (name, text) in DAGS {
            let dag = OperatorDag::from_json(text).unwrap();
            let profiles = ProfileSet::from_json(profiles(name).unwrap()).unwrap();
            for n in dag.nodes() {
                assert!(profiles.get(&n.profile_ref).is_ok(), "{name}: {}", n.profile_ref);
            }
        }
        for (_, text) in FLEETS {
            Fleet::from_json(text).unwrap();
        }
        for (_, text) in TRACES {
            assert!(!parse_trace(text.as_bytes()).unwrap().is_empty());
        }
        assert!(dag("nope").is_none());
        assert!(SCENARIO_SYNTH.parse::<crate::workload::SynthSpec>().is_ok());
    }
}
