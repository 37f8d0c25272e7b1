use tpseg_core::gradcheck::{run, GradcheckConfig, Primitive};

#[test]
fn every_primitive_passes_once() {
    let reports = run(&GradcheckConfig::default()).unwrap();
    assert_eq!(
        reports.iter().map(|r| r.primitive).collect::<Vec<_>>(),
        Primitive::ALL
    );
    for r in &reports {
        eprintln!(
            "{:<11} worst {:.3e} (tol {:.0e})",
            r.primitive.name(),
            r.worst_rel_error,
            r.tolerance
        );
        assert!(r.trials >= 20);
        assert!(r.passed(), "{r:?}");
    }
}

#[test]
fn corrupted_backward_is_detected() {
    for p in Primitive::ALL {
        let cfg = GradcheckConfig {
            trials: 3,
            fault: Some(p),
            ..GradcheckConfig::default()
        };
        let reports = run(&cfg).unwrap();
        for r in reports {
            assert_eq!(r.passed(), r.primitive != p, "{r:?}");
        }
    }
}
