"""
Crack detection application. This package contains all the code
responsible for building patch datasets from survey frames, fine-tuning
pretrained backbones, evaluating them and reporting the results.
"""
