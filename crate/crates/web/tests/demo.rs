use diffscm_web::Demo;

fn demo() -> Demo {
    Demo::try_new(6.0, 100, 200, 1).unwrap()
}

#[test]
fn data_and_labels_line_up() {
    let d = demo();
    assert_eq!(d.points().len(), 2 * d.labels().len());
    assert!(d.labels().iter().all(|&y| y < 2));
}

#[test]
fn forward_cloud_ends_near_standard_normal() {
    let d = demo();
    assert_eq!(d.try_forward_cloud(0, 3).unwrap(), d.points());
    let end = d.try_forward_cloud(d.steps(), 3).unwrap();
    let mean = end.iter().sum::<f64>() / end.len() as f64;
    let var = end.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / end.len() as f64;
    assert!(mean.abs() < 0.15 && (var - 1.0).abs() < 0.2, "{mean} {var}");
    assert!(d.try_forward_cloud(d.steps() + 1, 3).is_err());
}

#[test]
fn zero_scale_reconstructs_and_large_scale_crosses() {
    let d = demo();
    let path = d.try_counterfactual_path(-3.2, 0.4, 1, &[0.0, 3.0]).unwrap();
    assert_eq!(path.len(), 2 + 2 * 2);
    assert!((path[2] + 3.2).abs() < 0.05 && (path[3] - 0.4).abs() < 0.05);
    assert!(path[4] > 0.0);
    assert!(d.try_counterfactual_path(0.0, 0.0, 2, &[1.0]).is_err());
}

#[test]
fn interventions_land_in_the_target_component() {
    let d = demo();
    let s = d.try_intervene(0, 2.0, 64, 5).unwrap();
    let left = s.chunks(2).filter(|p| p[0] < 0.0).count();
    assert!(left >= 60, "{left}");
    assert_eq!(s, d.try_intervene(0, 2.0, 64, 5).unwrap());
}
