#![allow(dead_code)]

pub mod discrete;
pub mod glm_reference;
