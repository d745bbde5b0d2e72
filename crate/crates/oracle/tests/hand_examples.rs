use clustr_oracle::{attention, cluster, grid_pool, segment_softmax, segment_sum};

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12
}

#[test]
fn two_groups_on_a_line() {
    let x = vec![vec![0.0], vec![0.2], vec![9.0], vec![9.4]];
    let r = cluster(&x, 1, 2);
    assert!(close(r.rho[0], (-0.04f64).exp()));
    assert!(close(r.rho[2], (-0.16f64).exp()));
    assert!(close(r.delta[0], 9.4));
    assert!(close(r.delta[2], 8.8));
    assert_eq!(r.peaks, vec![0, 2]);
    assert_eq!(r.labels, vec![0, 0, 1, 1]);
}

#[test]
fn three_points_with_a_density_tie() {
    // d01 = 1, d12 = 2, d02 = 3; tokens 0 and 1 tie on density.
    let x = vec![vec![0.0], vec![1.0], vec![3.0]];
    let r = cluster(&x, 1, 2);
    assert!(close(r.rho[0], (-1.0f64).exp()) && close(r.rho[1], (-1.0f64).exp()));
    assert!(close(r.rho[2], (-4.0f64).exp()));
    assert_eq!([r.delta[0], r.delta[1], r.delta[2]], [3.0, 1.0, 2.0]);
    assert_eq!(r.peaks, vec![0, 1]);
    assert_eq!(r.labels, vec![0, 1, 1]);

    let one = cluster(&x, 2, 1);
    assert_eq!(one.peaks, vec![1]);
    assert_eq!(one.labels, vec![0, 0, 0]);
}

#[test]
fn every_token_its_own_cluster() {
    let x = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0], vec![5.0, 5.0]];
    let r = cluster(&x, 2, 4);
    let mut peaks = r.peaks.clone();
    peaks.sort();
    assert_eq!(peaks, vec![0, 1, 2, 3]);
    for (j, &p) in r.peaks.iter().enumerate() {
        assert_eq!(r.labels[p], j);
    }
}

#[test]
fn segment_helpers() {
    let w = segment_softmax(&[0.0, 2f64.ln(), 5.0], &[0, 0, 1]);
    assert!(close(w[0], 1.0 / 3.0) && close(w[1], 2.0 / 3.0) && close(w[2], 1.0));
    let s = segment_sum(&[vec![3.0], vec![6.0], vec![1.0]], &[0, 0, 1], &w, 2);
    assert!(close(s[0][0], 5.0) && close(s[1][0], 1.0));
}

#[test]
fn attention_with_one_key_copies_its_value() {
    let out = attention(&[vec![1.0, 2.0], vec![-3.0, 0.5]], &[vec![0.3, 0.3]], &[vec![7.0, -1.0]], 2.0);
    assert_eq!(out, vec![vec![7.0, -1.0], vec![7.0, -1.0]]);
}

#[test]
fn uniform_weights_pool_to_patch_means() {
    let x: Vec<Vec<f64>> = (0..16).map(|i| vec![i as f64]).collect();
    let pooled = grid_pool(&x, 4, 4, 2, &[0.25; 4]);
    let means: Vec<f64> = pooled.iter().map(|r| r[0]).collect();
    assert_eq!(means, vec![2.5, 4.5, 10.5, 12.5]);
}
