pub mod codec;
pub mod ledger;
pub mod mainchain;
pub mod replay;
pub mod script;
pub mod store;
