fn main() {
    println!("mfcl");
}
