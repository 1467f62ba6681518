#![allow(dead_code)]

pub use antipasto::selfcheck::Tiny;

pub fn tiny(init_scale: f64) -> Tiny {
    antipasto::selfcheck::tiny(init_scale).unwrap()
}
