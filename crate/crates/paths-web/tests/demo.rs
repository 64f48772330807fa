use paths_web::{rgba, survival_curve, Demo};

#[test]
fn demo_slide_and_selection() {
    let demo = Demo::create(3, 32).unwrap();
    let p = demo.pyramid();
    assert_eq!(p.n_levels(), 3);
    assert_eq!(rgba(&p.levels[2].pixels).len(), p.levels[2].width * p.levels[2].height * 4);

    let a = demo.selection(5).unwrap();
    let b = demo.selection(5).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.grid_w, a.grid_h), (32, 32));
    assert_eq!(a.counts[0], a.foreground[0]);
    for &c in &a.counts[1..] {
        assert!(c <= 20);
    }
    assert!(a.heat.iter().all(|&h| (0.0..1.0).contains(&h)));
    // every finest selected patch carries heat
    for uv in a.finest.chunks(2) {
        assert!(a.heat[uv[1] as usize * 32 + uv[0] as usize] > 0.0);
    }

    // with nothing filtered, only children of background parents are missed
    let wide = demo.selection(1000).unwrap();
    assert_eq!(wide.counts[0], wide.foreground[0]);
    for (c, f) in wide.counts.iter().zip(&wide.foreground) {
        assert!(c <= f);
    }
    assert!(wide.counts[2] > a.counts[2]);
}

#[test]
fn survival_curve_is_monotone() {
    let s = survival_curve(&[-2.0, 0.3, 1.0, -0.4]);
    assert!(s.windows(2).all(|w| w[1] < w[0]));
    assert!(s[0] < 1.0 && s[3] > 0.0);
}
