//! Pins the CSV schemas. Changing a header means bumping
//! `CSV_SCHEMA_VERSION` and adding a new golden file.

use shardsim::cli::{ANALYSIS_COLUMNS, CSV_SCHEMA_VERSION, SWEEP_COLUMNS};
use shardsim::simengine::{bandwidth_profile, run, write_bandwidth_csv};
use shardsim::strategy::{StrategyKind, StrategyPlan};
use shardsim::topology::{BandwidthPreset, ClusterTopology};
use shardsim::workload::ModelSpec;

fn header(csv: &[u8]) -> String {
    String::from_utf8_lossy(csv).lines().next().unwrap_or_default().to_string()
}

#[test]
fn csv_headers_match_golden() {
    assert_eq!(CSV_SCHEMA_VERSION, 1);
    let topo = ClusterTopology::commodity(2, 2, BandwidthPreset::Ib100RdmaMeasured).unwrap();
    let model = ModelSpec::uniform("toy", 2, 1_000_000, 2).unwrap().with_coefficients(1e-4, 2e-4, 0);
    let trace = run(&StrategyPlan::new(StrategyKind::Zero3), &model, &topo, 1).unwrap();
    let mut memory = Vec::new();
    trace.write_memory_csv(&mut memory).unwrap();
    let mut bandwidth = Vec::new();
    write_bandwidth_csv(&bandwidth_profile(&trace, 0.001).unwrap(), &mut bandwidth).unwrap();

    let got = format!(
        "analysis.csv: {}\nsweep_<axis>.csv: {}\nmemory.csv: {}\nbandwidth.csv: {}\n",
        ANALYSIS_COLUMNS.join(","),
        SWEEP_COLUMNS.join(","),
        header(&memory),
        header(&bandwidth)
    );
    let golden = include_str!("golden/csv_schema_v1.txt");
    assert_eq!(got, golden);
}
