use std::ffi::{CStr, CString};
use std::ptr;

use edmd_dl_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(edmd_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

const SMALL_CONFIG: &str = "schema_version = 1\n[train]\ndictionary_size = 8\nmax_epochs = 2\nepsilon = 1e-12\n\
[train.dictionary]\nkind = \"mlp\"\nwidth = 6\ndepth = 1\n";

fn small_dataset() -> *mut EdmdDataset {
    let mut ds = ptr::null_mut();
    let s = unsafe { edmd_dataset_generate_duffing(10, 8, 5, &mut ds) };
    assert_eq!(s, EdmdStatus::Ok);
    ds
}

fn small_model(ds: *const EdmdDataset) -> *mut EdmdModel {
    let cfg = CString::new(SMALL_CONFIG).unwrap();
    let mut model = ptr::null_mut();
    let s = unsafe { edmd_train(ds, cfg.as_ptr(), &mut model) };
    assert_eq!(s, EdmdStatus::Ok, "{}", last_error());
    model
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(edmd_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn dataset_round_trip_through_file() {
    let ds = small_dataset();
    let (mut d, mut n) = (0, 0);
    unsafe {
        assert_eq!(edmd_dataset_shape(ds, &mut d, &mut n), EdmdStatus::Ok);
    }
    assert_eq!((d, n), (2, 80));
    let tmp = tempfile::tempdir().unwrap();
    let path = CString::new(tmp.path().join("d.edmd").to_str().unwrap()).unwrap();
    let mut back = ptr::null_mut();
    unsafe {
        assert_eq!(edmd_dataset_save(ds, path.as_ptr()), EdmdStatus::Ok);
        assert_eq!(edmd_dataset_load(path.as_ptr(), &mut back), EdmdStatus::Ok);
        assert_eq!(edmd_dataset_shape(back, &mut d, &mut n), EdmdStatus::Ok);
        edmd_dataset_free(ds);
        edmd_dataset_free(back);
    }
    assert_eq!((d, n), (2, 80));
}

#[test]
fn train_predict_and_spectrum() {
    let ds = small_dataset();
    let model = small_model(ds);
    let (mut d, mut m) = (0, 0);
    unsafe {
        assert_eq!(edmd_model_shape(model, &mut d, &mut m), EdmdStatus::Ok);
    }
    assert_eq!((d, m), (2, 8));

    let x0 = [0.3, -0.7];
    let mut traj = vec![0.0; 4 * 2];
    unsafe {
        assert_eq!(edmd_model_predict(model, x0.as_ptr(), 2, 3, traj.as_mut_ptr(), traj.len()), EdmdStatus::Ok);
    }
    assert!(traj[..2].iter().zip(&x0).all(|(a, b)| (a - b).abs() < 1e-9));
    assert!(traj.iter().all(|v| v.is_finite()));

    let mut short = vec![0.0; 3];
    let s = unsafe { edmd_model_predict(model, x0.as_ptr(), 2, 3, short.as_mut_ptr(), short.len()) };
    assert_eq!(s, EdmdStatus::BufferTooSmall);
    assert!(last_error().contains("8 needed"), "{}", last_error());

    let (mut re, mut im) = (vec![0.0; m], vec![0.0; m]);
    unsafe {
        assert_eq!(edmd_model_eigenvalues(model, re.as_mut_ptr(), im.as_mut_ptr(), m), EdmdStatus::Ok);
    }
    // complex eigenvalues come in conjugate pairs
    let mut im_sorted = im.clone();
    im_sorted.sort_by(f64::total_cmp);
    for (a, b) in im_sorted.iter().zip(im_sorted.iter().rev()) {
        assert!((a + b).abs() < 1e-9);
    }

    let xs = [0.1, 0.2, -0.5, 0.4];
    let (mut pre, mut pim) = (vec![0.0; 2 * m], vec![0.0; 2 * m]);
    unsafe {
        assert_eq!(
            edmd_model_eigenfunctions(model, xs.as_ptr(), 2, pre.as_mut_ptr(), pim.as_mut_ptr(), 2 * m),
            EdmdStatus::Ok
        );
    }
    assert!(pre.iter().chain(&pim).all(|v| v.is_finite()));

    let tmp = tempfile::tempdir().unwrap();
    let path = CString::new(tmp.path().join("model.json").to_str().unwrap()).unwrap();
    let mut back = ptr::null_mut();
    let mut traj2 = vec![0.0; 8];
    unsafe {
        assert_eq!(edmd_model_save(model, path.as_ptr()), EdmdStatus::Ok);
        assert_eq!(edmd_model_load(path.as_ptr(), &mut back), EdmdStatus::Ok);
        assert_eq!(edmd_model_predict(back, x0.as_ptr(), 2, 3, traj2.as_mut_ptr(), 8), EdmdStatus::Ok);
        edmd_model_free(back);
        edmd_model_free(model);
        edmd_dataset_free(ds);
    }
    assert_eq!(traj, traj2);
}

#[test]
fn errors_are_reported() {
    let mut ds = ptr::null_mut();
    unsafe {
        assert_eq!(edmd_dataset_generate_duffing(0, 8, 1, &mut ds), EdmdStatus::InvalidArgument);
        assert!(ds.is_null());
        assert_eq!(edmd_dataset_generate_duffing(1, 1, 1, ptr::null_mut()), EdmdStatus::NullPointer);
        let missing = CString::new("/nonexistent/x.edmd").unwrap();
        assert_eq!(edmd_dataset_load(missing.as_ptr(), &mut ds), EdmdStatus::Io);
        assert!(last_error().contains("/nonexistent/x.edmd"));
        let mut model = ptr::null_mut();
        let missing = CString::new("/nonexistent/model.json").unwrap();
        assert_eq!(edmd_model_load(missing.as_ptr(), &mut model), EdmdStatus::Io);

        let ds = small_dataset();
        let bad = CString::new("schema_version = 1\n[train]\nlambda = -1.0\n").unwrap();
        assert_eq!(edmd_train(ds, bad.as_ptr(), &mut model), EdmdStatus::InvalidArgument);
        let junk = CString::new("not toml ===").unwrap();
        assert_eq!(edmd_train(ds, junk.as_ptr(), &mut model), EdmdStatus::InvalidArgument);
        assert_eq!(edmd_train(ptr::null(), ptr::null(), &mut model), EdmdStatus::NullPointer);
        let model = small_model(ds);
        let x = [1.0, 2.0, 3.0];
        let mut out = [0.0; 12];
        assert_eq!(edmd_model_predict(model, x.as_ptr(), 3, 3, out.as_mut_ptr(), 12), EdmdStatus::InvalidArgument);
        edmd_model_free(model);
        edmd_dataset_free(ds);
        edmd_dataset_free(ptr::null_mut());
        edmd_model_free(ptr::null_mut());
    }
}

#[test]
fn ks_unstable_substeps_is_numerical() {
    let mut ds = ptr::null_mut();
    let s = unsafe { edmd_dataset_generate_ks(64, 1, 50, 1, 0, &mut ds) };
    assert_eq!(s, EdmdStatus::Numerical, "{}", last_error());
    let s = unsafe { edmd_dataset_generate_ks(16, 2, 3, 0, 0, &mut ds) };
    assert_eq!(s, EdmdStatus::Ok);
    unsafe { edmd_dataset_free(ds) };
}

#[test]
fn generated_header_declares_api() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/edmd_dl.h")).unwrap();
    for sym in ["edmd_train", "edmd_model_predict", "edmd_last_error_message", "EDMD_STATUS_BUFFER_TOO_SMALL", "typedef struct EdmdModel EdmdModel"] {
        assert!(h.contains(sym), "header lacks {sym}");
    }
}
