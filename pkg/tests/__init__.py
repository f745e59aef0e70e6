"""homopursuit tests"""
