#![allow(dead_code)]

pub mod gan_gradcheck;
pub mod multibox_gradcheck;
pub mod oracles;
pub mod pipeline;
