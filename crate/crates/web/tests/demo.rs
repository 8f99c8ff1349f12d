use afn_web::{degrade, terrain_rgba, tile_weights};

#[test]
fn terrain_image_is_opaque_rgba() {
    let img = terrain_rgba(3, 64).unwrap();
    assert_eq!(img.len(), 64 * 64 * 4);
    assert!(img.chunks(4).all(|p| p[3] == 255 && p[0] == p[1] && p[1] == p[2]));
    assert_eq!(img, terrain_rgba(3, 64).unwrap());
}

#[test]
fn degradation_loses_detail() {
    let d = degrade(1, 100).unwrap();
    // 100 px at 2 m is 200 m, about 13 cells at 15 m
    assert_eq!(d.lr_dims, (13, 13));
    assert!(d.rmse_m > 0.0 && d.psnr_db.is_finite());
    assert_eq!(d.rgba.len(), 100 * 100 * 4);
}

#[test]
fn tile_weights_sum_to_one() {
    let (rows, cols, patch) = (90, 70, 40);
    let mut sum = vec![0.0; rows * cols];
    let mut tile = 0;
    while let Ok(w) = tile_weights(rows, cols, patch, 0.25, tile) {
        sum.iter_mut().zip(&w).for_each(|(s, v)| *s += v);
        tile += 1;
    }
    assert!(tile > 1);
    assert!(sum.iter().all(|s| (s - 1.0).abs() < 1e-12));
    assert!(tile_weights(rows, cols, patch, 0.5, 0).is_err());
}
