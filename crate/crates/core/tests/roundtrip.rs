use hetgroups::io::{read_assignment, read_centers, read_panel, write_fit, write_panel};
use hetgroups::sim::{generate_dgp, Regime, SimConfig};
use hetgroups::{feasible_kmeans, within_transform, PanelData};
use proptest::prelude::*;

fn panel_strategy() -> impl Strategy<Value = PanelData> {
    (1usize..6, 1usize..6, 1usize..4).prop_flat_map(|(n, t, p)| {
        (
            prop::collection::vec(-1e6..1e6f64, n * t),
            prop::collection::vec(-1e6..1e6f64, n * t * p),
            prop::collection::hash_set("[a-z]{1,4}|[0-9]{1,3}", n),
        )
            .prop_map(move |(y, x, units)| {
                let units: Vec<String> = units.into_iter().collect();
                let times: Vec<String> = (0..t).map(|s| format!("{}", 2000 + s)).collect();
                PanelData::with_labels(n, t, p, y, x, units, times).unwrap()
            })
    })
}

proptest! {
    #[test]
    fn csv_round_trip_is_exact(d in panel_strategy()) {
        let mut buf = Vec::new();
        write_panel(&d, &mut buf).unwrap();
        let back = read_panel(buf.as_slice()).unwrap();
        prop_assert_eq!(back.n_units(), d.n_units());
        prop_assert_eq!(back.n_periods(), d.n_periods());
        // Rows come back in label order, so compare unit by unit via labels.
        for (i, label) in d.unit_labels().iter().enumerate() {
            let j = back.unit_labels().iter().position(|l| l == label).unwrap();
            for (a, b) in d.y_unit(i).iter().zip(back.y_unit(j)) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
            for (a, b) in d.x_unit(i).iter().zip(back.x_unit(j)) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }
}

#[test]
fn fit_artifacts_reload() {
    let (raw, _) = generate_dgp(&SimConfig::default(), 30, 20, Regime::Alternative, 4).unwrap();
    let d = within_transform(&raw).unwrap();
    let fit = feasible_kmeans(&d, 2, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_fit(&fit, &d, dir.path()).unwrap();
    let centers = read_centers(&dir.path().join("centers.csv")).unwrap();
    assert_eq!(centers.alpha, fit.centers.alpha);
    let assignment = read_assignment(&dir.path().join("assignment.csv"), &d, 2).unwrap();
    assert_eq!(assignment.group_of, fit.assignment.group_of);
    assert!(read_assignment(&dir.path().join("assignment.csv"), &d, 1).is_err());
}
