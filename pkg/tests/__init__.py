# Tests package for rwre-toolkit
