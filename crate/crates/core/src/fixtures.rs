//! Calibration shipped with the crate: a 640x480 stereo webcam pair with a
//! 93 mm baseline.

use crate::io::kv::Document;
use crate::stereo::StereoRig;

pub const WEBCAM_RIG_CALIB: &str = include_str!("../fixtures/webcam_rig.calib");

pub fn webcam_rig() -> StereoRig {
    let doc = Document::parse(WEBCAM_RIG_CALIB).expect("fixture parses");
    StereoRig::from_calibration(&doc).expect("fixture is a valid rig")
}
