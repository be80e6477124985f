pub mod bench;
pub mod encoder;
pub mod features;
pub mod init;
pub mod numerics;
pub mod ssm;
pub mod training;
