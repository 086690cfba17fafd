use dictlin::controller::{is_hurwitz, lyapunov_solve};
use dictlin::dictionary::{build_standard_library, Dictionary, DomainBox, Family, LibrarySpec};
use dictlin::regressor::{build_f, BrunovskyStructure};
use dictlin::simulator::{rk4_step, ControlAffineSystem};
use dictlin::solver::{normalize, pack, unpack};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn ex2_dict() -> Dictionary {
    let spec = LibrarySpec::new(
        vec![Family::Coordinates, Family::Powers(2), Family::Powers(3), Family::Sin, Family::Cos],
        DomainBox::symmetric(2, 1.0),
    );
    build_standard_library(&spec, 1).unwrap()
}

fn mixed_dict() -> Dictionary {
    let spec = LibrarySpec {
        z: vec![Family::Coordinates, Family::Monomials(3), Family::Sin, Family::Cos],
        y: Some(vec![Family::Constant, Family::Monomials(2), Family::Cos]),
        w: Some(vec![Family::Constant, Family::Coordinates, Family::Sin]),
        domain: DomainBox::symmetric(3, 1.0),
    };
    build_standard_library(&spec, 2).unwrap()
}

fn vec_of(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn jacobian_matches_central_differences(x in vec_of(3)) {
        let d = mixed_dict();
        let j = d.eval_jacobian_z(&x).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let fd = (d.eval_z(&xp).unwrap() - d.eval_z(&xm).unwrap()) / (2.0 * h);
            for i in 0..d.s() {
                let scale = j[(i, k)].abs().max(1.0);
                prop_assert!((fd[i] - j[(i, k)]).abs() <= 1e-6 * scale, "entry ({i},{k})");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn regressor_equals_linearization_residual(
        x in vec_of(3), u in vec_of(2), dx in vec_of(3), seed in vec_of(64)
    ) {
        let d = mixed_dict();
        let bs = BrunovskyStructure::new(&[2, 1], 3).unwrap();
        let dims = d.dims();
        let mut it = seed.iter().cycle().enumerate().map(|(i, v)| v * (1.0 + 0.01 * i as f64));
        let t = DMatrix::from_fn(dims.n, dims.s, |_, _| it.next().unwrap());
        let nb = DMatrix::from_fn(dims.m, dims.p, |_, _| it.next().unwrap());
        let mb = DMatrix::from_fn(dims.m, dims.r, |_, _| it.next().unwrap());
        let v = pack(&t, &nb, &mb);

        let f = build_f(&d, &bs, &x, &u, &dx).unwrap().assembled();
        let lhs = f * v;
        let dxv = DVector::from_column_slice(&dx);
        let uv = DVector::from_column_slice(&u);
        let oracle = bs.a() * &t * d.eval_z(&x).unwrap()
            + bs.b() * (&nb * d.eval_y(&x).unwrap() + &mb * d.eval_w(&x).unwrap() * uv)
            - &t * d.eval_jacobian_z(&x).unwrap() * dxv;
        let scale = t.amax().max(nb.amax()).max(mb.amax()) * 50.0;
        prop_assert!((lhs - oracle).amax() <= 1e-14 * scale);
    }

    #[test]
    fn normalize_is_scale_invariant_and_idempotent(v in vec_of(12), c in prop_oneof![-1e6f64..-1e-6, 1e-6f64..1e6]) {
        let v = DVector::from_vec(v);
        prop_assume!(v.amax() > 1e-3);
        let (a, rec) = normalize(&v).unwrap();
        let (b, rec_b) = normalize(&(&v * c)).unwrap();
        prop_assert_eq!(rec.index, rec_b.index);
        prop_assert!((&a - &b).amax() <= 1e-12 * a.amax());
        let (again, rec_again) = normalize(&a).unwrap();
        prop_assert_eq!(again, a);
        prop_assert_eq!(rec_again.divisor, 1.0);
    }

    #[test]
    fn unpack_inverts_pack(v in vec_of(41)) {
        let dims = ex2_dict().dims();
        let v = DVector::from_vec(v);
        let (t, nb, mb) = unpack(&v, dims).unwrap();
        prop_assert_eq!(pack(&t, &nb, &mb), v);
    }

    #[test]
    fn lyapunov_residual_is_small(entries in vec_of(9), diag in vec_of(3)) {
        let raw = DMatrix::from_column_slice(3, 3, &entries);
        let shift = raw.norm() + 0.1;
        let a = raw - DMatrix::identity(3, 3) * shift;
        prop_assume!(is_hurwitz(&a));
        let q = DMatrix::from_diagonal(&DVector::from_iterator(3, diag.iter().map(|d| 1.0 + d.abs())));
        let p = lyapunov_solve(&a, &q).unwrap();
        let res = a.transpose() * &p + &p * &a + &q;
        prop_assert!(res.amax() <= 1e-10);
        prop_assert!(p.symmetric_eigenvalues().min() > 0.0);
    }
}

#[test]
fn rk4_converges_at_fourth_order() {
    let sys = ControlAffineSystem::example1(-0.5, 0.2);
    let field = |x: &DVector<f64>, u: &DVector<f64>| sys.vector_field(x.as_slice(), u.as_slice());
    let u = DVector::from_vec(vec![0.3]);
    let x0 = DVector::from_vec(vec![0.8, -0.6]);
    let integrate = |h: f64, steps: usize| {
        let mut x = x0.clone();
        for _ in 0..steps {
            x = rk4_step(field, &x, &u, h).unwrap();
        }
        x
    };
    let reference = integrate(1e-4, 20_000);
    let e1 = (integrate(0.1, 20) - &reference).norm();
    let e2 = (integrate(0.05, 40) - &reference).norm();
    let ratio = e1 / e2;
    assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
}
