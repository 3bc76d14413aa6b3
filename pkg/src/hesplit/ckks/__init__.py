"""Leveled CKKS: just enough for encrypted activations times plaintext weights."""

from .matrix import (
    EncryptedMatrix,
    Layout,
    batch_decrypt_matrix,
    batch_encrypt_matrix,
    he_linear,
    he_linear_batched,
    he_linear_per_row,
    required_rotations,
)
from .scheme import (
    STANDARD_PARAM_SETS,
    AlignmentError,
    CapabilityError,
    CapacityError,
    Ciphertext,
    DepthError,
    HEError,
    HEParams,
    ParameterError,
    Plaintext,
    PrivateContext,
    PublicContext,
    add,
    add_plain,
    decode,
    decrypt,
    decrypt_values,
    encode,
    encrypt,
    encrypt_symmetric,
    encrypt_values,
    keygen,
    multiply_plain,
    rescale,
    rotate,
)
from .serialize import (
    FormatError,
    ciphertext_from_bytes,
    ciphertext_to_bytes,
    matrix_from_bytes,
    matrix_to_bytes,
    private_context_from_bytes,
    private_context_to_bytes,
    public_context_from_bytes,
    public_context_to_bytes,
    serialized_size,
)
