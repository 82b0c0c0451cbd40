fn main() {
    println!("hypoflow");
}
