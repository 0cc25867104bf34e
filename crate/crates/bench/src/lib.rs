//! Fixtures shared by the benchmarks.

use digc_core::traffic_data::synthetic::{generate_synthetic_city, IncidentPlan, SyntheticCity, SyntheticScenario};

/// Two districts of 24 flows over three days with 20 incidents.
pub fn bench_city() -> SyntheticCity {
    generate_synthetic_city(&SyntheticScenario {
        seed: 5,
        n_flows: 48,
        districts: 2,
        days: 3,
        random_incidents: Some(IncidentPlan {
            count: 20,
            ..Default::default()
        }),
        ..Default::default()
    })
    .expect("bench scenario is feasible")
}
