use std::ffi::CString;
use std::ptr;

use laaf_ffi::*;

fn new_net(widths: &[usize], mode: u32, scale: f64) -> *mut LaafNetwork {
    let mut net = ptr::null_mut();
    let s = unsafe {
        laaf_network_new(
            widths.as_ptr(),
            widths.len(),
            mode,
            LAAF_ACTIVATION_TANH,
            scale,
            7,
            &mut net,
        )
    };
    assert_eq!(s, LaafStatus::Ok);
    assert!(!net.is_null());
    net
}

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    let n = unsafe { laaf_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

#[test]
fn forward_and_params() {
    let net = new_net(&[2, 5, 5, 1], LAAF_MODE_NLAAF, 2.0);
    let (mut din, mut dout, mut count) = (0, 0, 0);
    unsafe {
        assert_eq!(laaf_network_dims(net, &mut din, &mut dout), LaafStatus::Ok);
        assert_eq!(laaf_network_param_count(net, &mut count), LaafStatus::Ok);
    }
    assert_eq!((din, dout), (2, 1));
    assert_eq!(count, 15 + 30 + 6 + 10);

    let mut params = vec![0.0; count];
    unsafe { assert_eq!(laaf_network_get_params(net, params.as_mut_ptr(), count), LaafStatus::Ok) };
    assert!(params[count - 10..].iter().all(|&a| a == 0.5));

    let x = [0.1, -0.2, 0.3, 0.4];
    let mut y = [0.0; 2];
    unsafe {
        assert_eq!(
            laaf_network_forward(net, x.as_ptr(), 2, y.as_mut_ptr(), 2),
            LaafStatus::Ok
        )
    };
    assert!(y.iter().all(|v| v.is_finite()));

    // Zeroing the output layer gives its bias.
    let out_bias = 45 + 5;
    for v in &mut params[45..out_bias] {
        *v = 0.0;
    }
    params[out_bias] = 1.25;
    unsafe {
        assert_eq!(laaf_network_set_params(net, params.as_ptr(), count), LaafStatus::Ok);
        assert_eq!(
            laaf_network_forward(net, x.as_ptr(), 2, y.as_mut_ptr(), 2),
            LaafStatus::Ok
        );
    }
    assert_eq!(y, [1.25, 1.25]);
    unsafe { laaf_network_free(net) };
}

#[test]
fn slope_recovery_at_init() {
    let net = new_net(&[1, 4, 4, 4, 1], LAAF_MODE_LLAAF, 1.0);
    let mut s = 0.0;
    unsafe { assert_eq!(laaf_network_slope_recovery(net, &mut s), LaafStatus::Ok) };
    assert!((s - (-1.0f64).exp()).abs() < 1e-15);
    unsafe { laaf_network_free(net) };
}

#[test]
fn ratio_matches_hand_count() {
    let w = [1usize, 20, 20, 20, 1];
    let mut p = 0.0;
    unsafe { assert_eq!(laaf_param_count_ratio(w.as_ptr(), w.len(), &mut p), LaafStatus::Ok) };
    assert!((p - 962.0 / 901.0).abs() < 1e-12);
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("net.json").to_str().unwrap()).unwrap();
    let net = new_net(&[1, 3, 1], LAAF_MODE_GAAF, 1.0);
    let mut back = ptr::null_mut();
    unsafe {
        assert_eq!(laaf_network_save(net, path.as_ptr(), 7), LaafStatus::Ok);
        assert_eq!(laaf_network_load(path.as_ptr(), &mut back), LaafStatus::Ok);
    }
    let (mut a, mut b) = (vec![0.0; 11], vec![0.0; 11]);
    unsafe {
        assert_eq!(laaf_network_get_params(net, a.as_mut_ptr(), 11), LaafStatus::Ok);
        assert_eq!(laaf_network_get_params(back, b.as_mut_ptr(), 11), LaafStatus::Ok);
        laaf_network_free(net);
        laaf_network_free(back);
    }
    assert_eq!(a, b);
}

#[test]
fn step_equivalence_through_the_abi() {
    let net = new_net(&[1, 3, 2, 1], LAAF_MODE_NLAAF, 1.0);
    let x = [-0.5, 0.1, 0.8];
    let t = [0.2, -0.3, 0.7];
    let mut r = f64::NAN;
    unsafe {
        assert_eq!(
            laaf_verify_step_equivalence(net, x.as_ptr(), t.as_ptr(), 3, 0.01, &mut r),
            LaafStatus::Ok
        )
    };
    assert!(r < 1e-10, "{r}");
    unsafe { laaf_network_free(net) };

    let scaled = new_net(&[1, 3, 1], LAAF_MODE_LLAAF, 2.0);
    let s = unsafe { laaf_verify_step_equivalence(scaled, x.as_ptr(), t.as_ptr(), 3, 0.01, &mut r) };
    assert_eq!(s, LaafStatus::InvalidArgument);
    unsafe { laaf_network_free(scaled) };
}

#[test]
fn errors_are_reported() {
    let mut net = ptr::null_mut();
    let w = [1usize, 3, 1];
    unsafe {
        assert_eq!(
            laaf_network_new(w.as_ptr(), 3, 9, LAAF_ACTIVATION_TANH, 1.0, 0, &mut net),
            LaafStatus::InvalidArgument
        );
        assert!(last_error().contains("mode"));
        assert_eq!(
            laaf_network_new(w.as_ptr(), 3, LAAF_MODE_FIXED, 0, 1.0, 0, ptr::null_mut()),
            LaafStatus::Null
        );
        assert_eq!(
            laaf_network_new(w.as_ptr(), 3, LAAF_MODE_FIXED, 0, 0.5, 0, &mut net),
            LaafStatus::InvalidArgument
        );
        assert_eq!(laaf_network_param_count(ptr::null(), &mut 0), LaafStatus::Null);
        assert!(last_error().contains("network"));
    }
    let net = new_net(&w, LAAF_MODE_FIXED, 1.0);
    let x = [0.0];
    let mut y = [0.0; 3];
    unsafe {
        assert_eq!(
            laaf_network_forward(net, x.as_ptr(), 1, y.as_mut_ptr(), 3),
            LaafStatus::InvalidArgument
        );
        let bad = [f64::NAN; 10];
        assert_eq!(laaf_network_set_params(net, bad.as_ptr(), 10), LaafStatus::Numerical);
        let missing = CString::new("/nonexistent/dir/net.json").unwrap();
        let mut back = ptr::null_mut();
        assert_eq!(laaf_network_load(missing.as_ptr(), &mut back), LaafStatus::Io);
        assert!(back.is_null());
        laaf_network_free(net);
        laaf_network_free(ptr::null_mut());
    }
}

#[test]
fn last_error_truncates() {
    unsafe {
        laaf_network_param_count(ptr::null(), ptr::null_mut());
        let full = laaf_last_error(ptr::null_mut(), 0);
        let mut buf = [1 as std::ffi::c_char; 4];
        assert_eq!(laaf_last_error(buf.as_mut_ptr(), 4), full);
        assert_eq!(buf[3], 0);
    }
}
