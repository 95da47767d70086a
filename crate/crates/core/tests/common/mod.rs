#![allow(dead_code)]

pub mod bow;
pub mod desk;
pub mod fd;
