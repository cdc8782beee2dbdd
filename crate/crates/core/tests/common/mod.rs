#![allow(dead_code)]

pub mod pack_reference;
pub mod slide_reference;
pub mod split_reference;
