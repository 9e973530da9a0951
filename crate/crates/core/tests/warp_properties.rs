use gaflow::warp::{endpoint_error, warp_with_flow, FlowField, ThinPlateSpline};
use gaflow::Tensor;
use proptest::prelude::*;

fn image(c: usize, h: usize, w: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(0.0f64..1.0, c * h * w).prop_map(move |d| Tensor::new(vec![c, h, w], d).unwrap())
}

fn sized_image() -> impl Strategy<Value = Tensor<f64>> {
    (1usize..4, 1usize..9, 1usize..9).prop_flat_map(|(c, h, w)| image(c, h, w))
}

proptest! {
    #[test]
    fn zero_flow_is_identity(img in sized_image()) {
        let (_, h, w) = img.dims3().unwrap();
        prop_assert_eq!(warp_with_flow(&img, &FlowField::zeros(h, w)).unwrap(), img);
    }

    #[test]
    fn integer_flow_is_a_clamped_shift(img in sized_image(), u in -3i32..4, v in -3i32..4) {
        let (c, h, w) = img.dims3().unwrap();
        let out = warp_with_flow(&img, &FlowField::constant(h, w, u as f64, v as f64)).unwrap();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = (y as i32 + v).clamp(0, h as i32 - 1) as usize;
                    let sx = (x as i32 + u).clamp(0, w as i32 - 1) as usize;
                    prop_assert_eq!(out.data()[(ch * h + y) * w + x], img.data()[(ch * h + sy) * w + sx]);
                }
            }
        }
    }

    #[test]
    fn warp_stays_within_source_range(
        img in image(2, 6, 5),
        flow in prop::collection::vec(-8.0f64..8.0, 2 * 6 * 5),
    ) {
        let flow = FlowField::new(Tensor::new(vec![2, 6, 5], flow).unwrap()).unwrap();
        let out = warp_with_flow(&img, &flow).unwrap();
        for ch in 0..2 {
            let src = img.channel(ch);
            let lo = src.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for &v in out.channel(ch) {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn endpoint_error_of_constant_offset(
        flow in prop::collection::vec(-5.0f64..5.0, 2 * 4 * 3),
        du in -3.0f64..3.0,
        dv in -3.0f64..3.0,
    ) {
        let a = FlowField::new(Tensor::new(vec![2, 4, 3], flow).unwrap()).unwrap();
        let b = FlowField::new(Tensor::from_fn(&[2, 4, 3], |i| {
            a.tensor().data()[i] + if i < 12 { du } else { dv }
        }))
        .unwrap();
        prop_assert_eq!(endpoint_error(&a, &a).unwrap(), 0.0);
        prop_assert!((endpoint_error(&a, &b).unwrap() - du.hypot(dv)).abs() < 1e-9);
    }

    #[test]
    fn thin_plate_spline_interpolates_its_controls(
        jitter in prop::collection::vec(-0.3f64..0.3, 12),
        shift in prop::collection::vec(-2.0f64..2.0, 12),
    ) {
        let grid = [(1.0, 1.0), (6.0, 1.5), (1.5, 6.0), (6.0, 6.0), (3.5, 3.0), (2.0, 4.0)];
        let from: Vec<(f64, f64)> = grid
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| (x + jitter[2 * i], y + jitter[2 * i + 1]))
            .collect();
        let to: Vec<(f64, f64)> = from
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| (x + shift[2 * i], y + shift[2 * i + 1]))
            .collect();
        let tps = ThinPlateSpline::fit(&from, &to).unwrap();
        for (&(x, y), &(tx, ty)) in from.iter().zip(&to) {
            let (ex, ey) = tps.eval(x, y);
            prop_assert!((ex - tx).abs() < 1e-8 && (ey - ty).abs() < 1e-8);
        }
    }
}
